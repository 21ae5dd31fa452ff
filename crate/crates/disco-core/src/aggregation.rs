//! Filters, attribute discards and generic aggregators.
//!
//! Aggregation only merges similar events: the result is an event of the
//! same kind with altered attributes. Each retained attribute is folded
//! independently by the accumulator for its (operator, type) pair, and the
//! running state composes: an already-aggregated event can be folded into a
//! pending aggregate by weighting it with its own base count, which is what
//! lets trees aggregate at several stages.
//!
//! MEAN is maintained as a (sum, weight) pair. On the wire a MEAN attribute
//! carries the running sum (the weight travels as the message's base count);
//! the division happens once, at local delivery. This keeps tree-shaped
//! composition exactly equal to a flat pass for integer types and within one
//! rounding step per merge for floats.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use crate::events::{
    extract_component, AggMeta, AttrType, AttrValue, EventRecord, FlowKeySchema, Template,
};
use crate::overlay::NodeId;
use crate::reply::ZFilter;
use crate::simnet::{SimDuration, SimTime, TimerHandle};
use crate::vocabulary::ConceptId;

/// One constraint on one attribute (possibly a flow-key component).
///
/// Constraint lists use grouped semantics: constraints on the *same*
/// attribute are alternatives (any may hold), constraints on *different*
/// attributes must all hold. The grouping is what makes a per-attribute
/// union of child filters expressible when subscriptions are merged upstream.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConstraint {
    pub attr_id: ConceptId,
    pub kind: ConstraintKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    /// value ≥ bound
    Lower(AttrValue),
    /// value ≤ bound
    Upper(AttrValue),
    /// lower ≤ value ≤ upper
    Range(AttrValue, AttrValue),
    Exact(AttrValue),
    /// Address lies under the prefix; only meaningful for address-valued
    /// attributes.
    Prefix(Ipv4Addr, u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecError {
    /// RANGE with lower > upper, or bounds of different types.
    BadRange,
    /// Prefix length above 32.
    BadPrefix,
    /// Granularity with neither a count nor a period limit.
    EmptyGranularity,
    /// Explicitly selected operator is undefined for the attribute's type.
    InvalidOperator(AggregatorOp, AttrType),
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::BadRange => write!(f, "range lower bound above upper bound"),
            SpecError::BadPrefix => write!(f, "prefix length above 32"),
            SpecError::EmptyGranularity => write!(f, "granularity needs a count or period limit"),
            SpecError::InvalidOperator(op, ty) => {
                write!(f, "operator {op:?} undefined for attribute type {ty:?}")
            }
        }
    }
}

impl FilterConstraint {
    pub fn validate(&self) -> Result<(), SpecError> {
        match &self.kind {
            ConstraintKind::Range(lo, hi) => match lo.cmp_same_type(hi) {
                Some(ord) if ord != core::cmp::Ordering::Greater => Ok(()),
                _ => Err(SpecError::BadRange),
            },
            ConstraintKind::Prefix(_, len) if *len > 32 => Err(SpecError::BadPrefix),
            _ => Ok(()),
        }
    }
}

fn prefix_mask(len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        (!0u32) << (32 - len as u32)
    }
}

fn under_prefix(addr: Ipv4Addr, prefix: Ipv4Addr, len: u8) -> bool {
    let m = prefix_mask(len);
    (u32::from(addr) & m) == (u32::from(prefix) & m)
}

/// Does a single constraint accept this value? Type-mismatched comparisons
/// never match.
pub fn constraint_matches(kind: &ConstraintKind, value: &AttrValue) -> bool {
    use core::cmp::Ordering::*;
    match kind {
        ConstraintKind::Lower(bound) => {
            matches!(value.cmp_same_type(bound), Some(Greater | Equal))
        }
        ConstraintKind::Upper(bound) => matches!(value.cmp_same_type(bound), Some(Less | Equal)),
        ConstraintKind::Range(lo, hi) => {
            matches!(value.cmp_same_type(lo), Some(Greater | Equal))
                && matches!(value.cmp_same_type(hi), Some(Less | Equal))
        }
        ConstraintKind::Exact(bound) => matches!(value.cmp_same_type(bound), Some(Equal)),
        ConstraintKind::Prefix(prefix, len) => match value {
            AttrValue::Ipv4(a) => under_prefix(*a, *prefix, *len),
            AttrValue::Ipv4Prefix(a, alen) => *alen >= *len && under_prefix(*a, *prefix, *len),
            _ => false,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissingAttribute(pub ConceptId);

/// Looks an attribute up in a record, reaching into flow-key compounds for
/// registered component ids.
pub fn attribute_value(
    record: &EventRecord,
    template: &Template,
    attr: ConceptId,
    schema: &FlowKeySchema,
) -> Result<AttrValue, MissingAttribute> {
    if let Some(v) = record.value_of(template, attr) {
        return Ok(*v);
    }
    if schema.is_component(attr) {
        for (idx, (_, ty)) in template.fields.iter().enumerate() {
            if *ty == AttrType::FlowKey {
                if let Some(AttrValue::Flow(key)) = record.values.get(idx) {
                    return extract_component(key, attr, schema)
                        .map_err(|_| MissingAttribute(attr));
                }
            }
        }
    }
    Err(MissingAttribute(attr))
}

/// Evaluates a constraint list against an event: true iff every constrained
/// attribute accepts (constraints on one attribute being alternatives).
/// A constraint naming an attribute absent from the template is an error.
pub fn eval_filter(
    record: &EventRecord,
    template: &Template,
    constraints: &[FilterConstraint],
    schema: &FlowKeySchema,
) -> Result<bool, MissingAttribute> {
    let mut groups: BTreeMap<ConceptId, bool> = BTreeMap::new();
    for c in constraints {
        let value = attribute_value(record, template, c.attr_id, schema)?;
        let entry = groups.entry(c.attr_id).or_insert(false);
        *entry |= constraint_matches(&c.kind, &value);
    }
    Ok(groups.values().all(|&ok| ok))
}

/// Predefined aggregation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum AggregatorOp {
    Sum = 1,
    Min = 2,
    Max = 3,
    Mean = 4,
    Count = 5,
    First = 6,
    Last = 7,
}

impl AggregatorOp {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => AggregatorOp::Sum,
            2 => AggregatorOp::Min,
            3 => AggregatorOp::Max,
            4 => AggregatorOp::Mean,
            5 => AggregatorOp::Count,
            6 => AggregatorOp::First,
            7 => AggregatorOp::Last,
            _ => return None,
        })
    }
}

/// The (operator × type) applicability matrix.
pub fn op_valid(op: AggregatorOp, ty: AttrType) -> bool {
    use AggregatorOp::*;
    use AttrType::*;
    match op {
        Sum | Mean => matches!(ty, Counter64 | Gauge64 | Float64),
        Min | Max => matches!(ty, Counter64 | Gauge64 | Float64 | Timestamp),
        Count => matches!(ty, Counter64),
        First | Last => true,
    }
}

/// Default operator applied when the subscriber names none for an attribute.
pub fn default_op(ty: AttrType) -> AggregatorOp {
    use AttrType::*;
    match ty {
        Counter64 => AggregatorOp::Sum,
        Gauge64 | Float64 => AggregatorOp::Mean,
        Timestamp => AggregatorOp::Min,
        Ipv4Addr | Ipv4Prefix | FlowKey | NodeLoc => AggregatorOp::First,
    }
}

/// Resolves the operator actually applied to an attribute: the explicit
/// choice when valid for the type, the type default otherwise.
pub fn resolve_op(explicit: Option<AggregatorOp>, ty: AttrType) -> AggregatorOp {
    match explicit {
        Some(op) if op_valid(op, ty) => op,
        _ => default_op(ty),
    }
}

/// Granularity limits for one subscription: flush a pending aggregate as
/// soon as either trigger fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GranularitySpec {
    pub max_events: Option<u32>,
    pub max_period: Option<SimDuration>,
}

impl GranularitySpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        match (self.max_events, self.max_period) {
            (None, None) => Err(SpecError::EmptyGranularity),
            (Some(0), _) => Err(SpecError::EmptyGranularity),
            (_, Some(SimDuration::ZERO)) => Ok(()),
            _ => Ok(()),
        }
    }

    pub fn per_event() -> Self {
        Self { max_events: Some(1), max_period: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TypeMismatch {
    pub attr_id: ConceptId,
    pub expected: AttrType,
}

#[derive(Debug, Clone)]
enum AccState {
    SumCounter(u64),
    SumGauge(i64),
    SumFloat(f64),
    Min(Option<AttrValue>),
    Max(Option<AttrValue>),
    Count(u64),
    First(Option<AttrValue>),
    Last(Option<AttrValue>),
}

impl AccState {
    fn new(op: AggregatorOp, ty: AttrType) -> Self {
        // Mean shares the sum state; the division happens at delivery.
        match op {
            AggregatorOp::Sum | AggregatorOp::Mean => match ty {
                AttrType::Counter64 => AccState::SumCounter(0),
                AttrType::Gauge64 => AccState::SumGauge(0),
                _ => AccState::SumFloat(0.0),
            },
            AggregatorOp::Min => AccState::Min(None),
            AggregatorOp::Max => AccState::Max(None),
            AggregatorOp::Count => AccState::Count(0),
            AggregatorOp::First => AccState::First(None),
            AggregatorOp::Last => AccState::Last(None),
        }
    }

    fn fold(&mut self, value: &AttrValue, weight: u32) {
        use core::cmp::Ordering::*;
        match self {
            AccState::SumCounter(acc) => {
                if let AttrValue::Counter(v) = value {
                    *acc = acc.wrapping_add(*v);
                }
            }
            AccState::SumGauge(acc) => {
                if let AttrValue::Gauge(v) = value {
                    *acc = acc.wrapping_add(*v);
                }
            }
            AccState::SumFloat(acc) => {
                if let AttrValue::Float(v) = value {
                    *acc += *v;
                }
            }
            AccState::Min(best) => match best {
                None => *best = Some(*value),
                Some(b) => {
                    if matches!(value.cmp_same_type(b), Some(Less)) {
                        *best = Some(*value);
                    }
                }
            },
            AccState::Max(best) => match best {
                None => *best = Some(*value),
                Some(b) => {
                    if matches!(value.cmp_same_type(b), Some(Greater)) {
                        *best = Some(*value);
                    }
                }
            },
            AccState::Count(n) => *n += weight as u64,
            AccState::First(slot) => {
                if slot.is_none() {
                    *slot = Some(*value);
                }
            }
            AccState::Last(slot) => *slot = Some(*value),
        }
    }

    fn emit(&self, ty: AttrType) -> AttrValue {
        match self {
            AccState::SumCounter(v) => AttrValue::Counter(*v),
            AccState::SumGauge(v) => AttrValue::Gauge(*v),
            AccState::SumFloat(v) => match ty {
                AttrType::Float64 => AttrValue::Float(*v),
                // Unreachable by the validity matrix; emit a float anyway.
                _ => AttrValue::Float(*v),
            },
            AccState::Count(n) => AttrValue::Counter(*n),
            AccState::Min(v) | AccState::Max(v) | AccState::First(v) | AccState::Last(v) => {
                v.expect("finalize requires at least one accumulated event")
            }
        }
    }
}

/// In-flight aggregate for one (child, event kind) pair at a forwarder.
#[derive(Debug, Clone)]
pub struct PendingAggregate {
    out_issuer: NodeId,
    out_template_id: u16,
    event_id: ConceptId,
    attrs: Vec<(ConceptId, AttrType, AggregatorOp, AccState)>,
    base_count: u32,
    period_start: SimTime,
    pub timer: Option<TimerHandle>,
    zfilter: ZFilter,
}

impl PendingAggregate {
    /// Creates an empty aggregate emitting under `child_template`.
    /// `period_start` anchors at creation, i.e. arrival of the first event.
    pub fn new(
        child_template: &Template,
        ops: &BTreeMap<ConceptId, AggregatorOp>,
        now: SimTime,
    ) -> Self {
        let attrs = child_template
            .fields
            .iter()
            .map(|(attr, ty)| {
                let op = resolve_op(ops.get(attr).copied(), *ty);
                (*attr, *ty, op, AccState::new(op, *ty))
            })
            .collect();
        Self {
            out_issuer: child_template.issuer,
            out_template_id: child_template.template_id,
            event_id: child_template.event_id,
            attrs,
            base_count: 0,
            period_start: now,
            timer: None,
            zfilter: ZFilter::default(),
        }
    }

    pub fn base_count(&self) -> u32 {
        self.base_count
    }

    pub fn period_start(&self) -> SimTime {
        self.period_start
    }

    pub fn is_empty(&self) -> bool {
        self.base_count == 0
    }

    /// Folds one incoming event in. `weight` is the event's own base count
    /// (1 for base events); the whole call is rejected without side effects
    /// when any retained attribute is absent or mistyped in the incoming
    /// template.
    pub fn accumulate(
        &mut self,
        record: &EventRecord,
        in_template: &Template,
        meta: AggMeta,
        zfilter: &ZFilter,
    ) -> Result<(), TypeMismatch> {
        let mut picked: Vec<Option<AttrValue>> = Vec::with_capacity(self.attrs.len());
        for (attr, ty, _, _) in &self.attrs {
            let value = record.value_of(in_template, *attr).copied();
            match value {
                Some(v) if v.attr_type() == *ty => picked.push(Some(v)),
                _ => return Err(TypeMismatch { attr_id: *attr, expected: *ty }),
            }
        }
        for ((_, _, _, state), value) in self.attrs.iter_mut().zip(picked) {
            state.fold(&value.unwrap(), meta.base_count);
        }
        self.base_count += meta.base_count;
        self.zfilter.merge(zfilter);
        Ok(())
    }

    /// Emits the aggregate as one event record plus its meta; the z-Filter
    /// is the OR superposition of all folded inputs.
    pub fn finalize(self, now: SimTime) -> (EventRecord, AggMeta, ZFilter) {
        debug_assert!(self.base_count >= 1);
        let values = self.attrs.iter().map(|(_, ty, _, st)| st.emit(*ty)).collect();
        let record = EventRecord {
            event_id: self.event_id,
            template_id: self.out_template_id,
            issuer: self.out_issuer,
            values,
        };
        let meta = AggMeta {
            base_count: self.base_count,
            period_start: self.period_start,
            period_end: now,
        };
        (record, meta, self.zfilter)
    }
}

/// Converts wire values to subscriber-facing ones at local delivery: MEAN
/// attributes divide their running sum by the aggregate's base count
/// (truncating division for integer types).
pub fn present_for_delivery(
    record: &mut EventRecord,
    template: &Template,
    ops: &BTreeMap<ConceptId, AggregatorOp>,
    base_count: u32,
) {
    if base_count == 0 {
        return;
    }
    for (idx, (attr, ty)) in template.fields.iter().enumerate() {
        if resolve_op(ops.get(attr).copied(), *ty) == AggregatorOp::Mean {
            if let Some(v) = record.values.get_mut(idx) {
                *v = match *v {
                    AttrValue::Counter(sum) => AttrValue::Counter(sum / base_count as u64),
                    AttrValue::Gauge(sum) => AttrValue::Gauge(sum / base_count as i64),
                    AttrValue::Float(sum) => AttrValue::Float(sum / base_count as f64),
                    other => other,
                };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardOutcome {
    Retained,
    /// Every field was discarded: deliveries degenerate to bare counts.
    AllFieldsDiscarded,
}

/// Derives the template a child sees: the parent template minus discarded
/// attributes, re-issued by the forwarder under a fresh template id. Unknown
/// discard ids are ignored; field order is preserved.
pub fn derive_child_template(
    parent: &Template,
    discards: &[ConceptId],
    out_issuer: NodeId,
    out_template_id: u16,
) -> (Template, DiscardOutcome) {
    let fields: Vec<_> = parent
        .fields
        .iter()
        .filter(|(attr, _)| !discards.contains(attr))
        .cloned()
        .collect();
    let outcome = if fields.is_empty() && !parent.fields.is_empty() {
        DiscardOutcome::AllFieldsDiscarded
    } else {
        DiscardOutcome::Retained
    };
    (
        Template { issuer: out_issuer, template_id: out_template_id, event_id: parent.event_id, fields },
        outcome,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabulary::VocabularyTree;
    use alloc::vec;

    fn schema() -> (VocabularyTree, FlowKeySchema) {
        let mut v = VocabularyTree::new();
        v.register_str("attribute.flow").unwrap();
        let s = FlowKeySchema::register(&mut v).unwrap();
        (v, s)
    }

    fn counter_attr() -> ConceptId {
        ConceptId(0x0501_0000)
    }

    fn counter_template(issuer: u64) -> Template {
        Template {
            issuer: NodeId(issuer),
            template_id: 1,
            event_id: ConceptId(0x0101_0000),
            fields: vec![(counter_attr(), AttrType::Counter64)],
        }
    }

    fn counter_event(t: &Template, v: u64) -> EventRecord {
        EventRecord {
            event_id: t.event_id,
            template_id: t.template_id,
            issuer: t.issuer,
            values: vec![AttrValue::Counter(v)],
        }
    }

    fn flow_template(schema: &FlowKeySchema) -> (Template, ConceptId) {
        let flow_attr = ConceptId(0x0502_0000);
        let _ = schema;
        (
            Template {
                issuer: NodeId(9),
                template_id: 2,
                event_id: ConceptId(0x0101_0100),
                fields: vec![(flow_attr, AttrType::FlowKey)],
            },
            flow_attr,
        )
    }

    fn flow_event(t: &Template, dst: Ipv4Addr) -> EventRecord {
        EventRecord {
            event_id: t.event_id,
            template_id: t.template_id,
            issuer: t.issuer,
            values: vec![AttrValue::Flow(crate::events::FlowKey {
                src_addr: Ipv4Addr::new(10, 0, 0, 1),
                dst_addr: dst,
                src_port: 1234,
                dst_port: 80,
                proto: 6,
            })],
        }
    }

    #[test]
    fn prefix_constraint_on_flow_component() {
        let (_, s) = schema();
        let (t, _) = flow_template(&s);
        let e = flow_event(&t, Ipv4Addr::new(4, 2, 1, 7));
        let c = FilterConstraint {
            attr_id: s.dst_addr,
            kind: ConstraintKind::Prefix(Ipv4Addr::new(4, 2, 0, 0), 16),
        };
        assert_eq!(eval_filter(&e, &t, core::slice::from_ref(&c), &s), Ok(true));
        let miss = flow_event(&t, Ipv4Addr::new(9, 9, 9, 9));
        assert_eq!(eval_filter(&miss, &t, core::slice::from_ref(&c), &s), Ok(false));
    }

    #[test]
    fn empty_constraint_list_is_vacuously_true() {
        let (_, s) = schema();
        let t = counter_template(1);
        let e = counter_event(&t, 5);
        assert_eq!(eval_filter(&e, &t, &[], &s), Ok(true));
    }

    #[test]
    fn out_of_range_counter_fails() {
        let (_, s) = schema();
        let t = counter_template(1);
        let e = counter_event(&t, 25);
        let c = FilterConstraint {
            attr_id: counter_attr(),
            kind: ConstraintKind::Range(AttrValue::Counter(10), AttrValue::Counter(20)),
        };
        assert_eq!(eval_filter(&e, &t, core::slice::from_ref(&c), &s), Ok(false));
    }

    #[test]
    fn same_attribute_constraints_are_alternatives() {
        let (_, s) = schema();
        let (t, _) = flow_template(&s);
        let e = flow_event(&t, Ipv4Addr::new(7, 7, 3, 3));
        let cs = vec![
            FilterConstraint {
                attr_id: s.dst_addr,
                kind: ConstraintKind::Prefix(Ipv4Addr::new(4, 2, 0, 0), 16),
            },
            FilterConstraint {
                attr_id: s.dst_addr,
                kind: ConstraintKind::Prefix(Ipv4Addr::new(7, 7, 0, 0), 16),
            },
        ];
        assert_eq!(eval_filter(&e, &t, &cs, &s), Ok(true));
    }

    #[test]
    fn constraint_on_absent_attribute_errors() {
        let (_, s) = schema();
        let t = counter_template(1);
        let e = counter_event(&t, 5);
        let ghost = ConceptId(0x0F0F_0000);
        let c = FilterConstraint { attr_id: ghost, kind: ConstraintKind::Exact(AttrValue::Counter(5)) };
        assert_eq!(
            eval_filter(&e, &t, core::slice::from_ref(&c), &s),
            Err(MissingAttribute(ghost))
        );
    }

    #[test]
    fn discard_nothing_keeps_fields_with_fresh_id() {
        let t = counter_template(1);
        let (child, outcome) = derive_child_template(&t, &[], NodeId(50), 77);
        assert_eq!(outcome, DiscardOutcome::Retained);
        assert_eq!(child.fields, t.fields);
        assert_eq!(child.template_id, 77);
        assert_eq!(child.issuer, NodeId(50));
    }

    #[test]
    fn discard_timestamp_from_drop_template() {
        let ts_attr = ConceptId(0x0503_0000);
        let t = Template {
            issuer: NodeId(1),
            template_id: 3,
            event_id: ConceptId(0x0101_0100),
            fields: vec![
                (ConceptId(0x0502_0000), AttrType::FlowKey),
                (ConceptId(0x0504_0000), AttrType::NodeLoc),
                (ts_attr, AttrType::Timestamp),
            ],
        };
        let (child, outcome) = derive_child_template(&t, &[ts_attr], NodeId(2), 4);
        assert_eq!(outcome, DiscardOutcome::Retained);
        assert_eq!(child.fields.len(), 2);
        assert!(child.field_index(ts_attr).is_none());
    }

    #[test]
    fn discarding_everything_is_flagged_but_counts_still_flow() {
        let t = counter_template(1);
        let (child, outcome) = derive_child_template(&t, &[counter_attr()], NodeId(2), 5);
        assert_eq!(outcome, DiscardOutcome::AllFieldsDiscarded);
        assert!(child.fields.is_empty());

        let mut agg = PendingAggregate::new(&child, &BTreeMap::new(), SimTime::ZERO);
        for v in [1u64, 2, 3] {
            let e = counter_event(&t, v);
            agg.accumulate(&e, &t, AggMeta::base(SimTime::ZERO), &ZFilter::default()).unwrap();
        }
        let (record, meta, _) = agg.finalize(SimTime::from_micros(10));
        assert!(record.values.is_empty());
        assert_eq!(meta.base_count, 3);
    }

    #[test]
    fn sum_accumulates() {
        let t = counter_template(1);
        let mut agg = PendingAggregate::new(&t, &BTreeMap::new(), SimTime::ZERO);
        for v in [3u64, 4, 5] {
            agg.accumulate(&counter_event(&t, v), &t, AggMeta::base(SimTime::ZERO), &ZFilter::default())
                .unwrap();
        }
        let (record, meta, _) = agg.finalize(SimTime::from_micros(1));
        assert_eq!(record.values[0], AttrValue::Counter(12));
        assert_eq!(meta.base_count, 3);
    }

    #[test]
    fn weighted_mean_merge_matches_arithmetic() {
        // Upstream aggregates: (mean 2, count 2) and (mean 5, count 1),
        // carried on the wire as running sums 4 and 5.
        let gauge_attr = ConceptId(0x0505_0000);
        let t = Template {
            issuer: NodeId(1),
            template_id: 6,
            event_id: ConceptId(0x0102_0000),
            fields: vec![(gauge_attr, AttrType::Gauge64)],
        };
        let mut ops = BTreeMap::new();
        ops.insert(gauge_attr, AggregatorOp::Mean);
        let mut agg = PendingAggregate::new(&t, &ops, SimTime::ZERO);
        let upstream = [(4i64, 2u32), (5, 1)];
        for (sum, count) in upstream {
            let e = EventRecord {
                event_id: t.event_id,
                template_id: t.template_id,
                issuer: t.issuer,
                values: vec![AttrValue::Gauge(sum)],
            };
            let meta = AggMeta { base_count: count, period_start: SimTime::ZERO, period_end: SimTime::ZERO };
            agg.accumulate(&e, &t, meta, &ZFilter::default()).unwrap();
        }
        let (mut record, meta, _) = agg.finalize(SimTime::from_micros(1));
        assert_eq!(meta.base_count, 3);
        present_for_delivery(&mut record, &t, &ops, meta.base_count);
        assert_eq!(record.values[0], AttrValue::Gauge(3));
    }

    #[test]
    fn min_timestamp_is_earliest_publication() {
        let ts_attr = ConceptId(0x0503_0000);
        let t = Template {
            issuer: NodeId(1),
            template_id: 8,
            event_id: ConceptId(0x0103_0000),
            fields: vec![(ts_attr, AttrType::Timestamp)],
        };
        let mut rng = crate::rng::SplitMix64::new(5);
        let stamps: Vec<u64> = (0..50).map(|_| rng.next_below(1_000_000)).collect();
        // Brute-force oracle over the event log.
        let earliest = *stamps.iter().min().unwrap();
        let mut agg = PendingAggregate::new(&t, &BTreeMap::new(), SimTime::ZERO);
        for &ts in &stamps {
            let e = EventRecord {
                event_id: t.event_id,
                template_id: t.template_id,
                issuer: t.issuer,
                values: vec![AttrValue::Timestamp(SimTime::from_micros(ts))],
            };
            agg.accumulate(&e, &t, AggMeta::base(SimTime::from_micros(ts)), &ZFilter::default())
                .unwrap();
        }
        let (record, _, _) = agg.finalize(SimTime::from_micros(2_000_000));
        assert_eq!(record.values[0], AttrValue::Timestamp(SimTime::from_micros(earliest)));
    }

    #[test]
    fn single_event_aggregate_is_identity() {
        let t = counter_template(1);
        let mut agg = PendingAggregate::new(&t, &BTreeMap::new(), SimTime::from_micros(5));
        agg.accumulate(&counter_event(&t, 42), &t, AggMeta::base(SimTime::from_micros(5)), &ZFilter::default())
            .unwrap();
        let (record, meta, _) = agg.finalize(SimTime::from_micros(5));
        assert_eq!(record.values[0], AttrValue::Counter(42));
        assert_eq!(meta.base_count, 1);
        assert_eq!(meta.period_start, meta.period_end);
    }

    #[test]
    fn mismatched_event_is_rejected_without_side_effects() {
        let t = counter_template(1);
        let mut agg = PendingAggregate::new(&t, &BTreeMap::new(), SimTime::ZERO);
        agg.accumulate(&counter_event(&t, 1), &t, AggMeta::base(SimTime::ZERO), &ZFilter::default())
            .unwrap();
        let other = Template {
            issuer: NodeId(2),
            template_id: 9,
            event_id: t.event_id,
            fields: vec![(ConceptId(0x0F00_0000), AttrType::Gauge64)],
        };
        let bad = EventRecord {
            event_id: other.event_id,
            template_id: other.template_id,
            issuer: other.issuer,
            values: vec![AttrValue::Gauge(-1)],
        };
        let err = agg.accumulate(&bad, &other, AggMeta::base(SimTime::ZERO), &ZFilter::default());
        assert!(err.is_err());
        assert_eq!(agg.base_count(), 1);
    }

    #[test]
    fn operator_matrix_and_defaults() {
        assert!(op_valid(AggregatorOp::Sum, AttrType::Counter64));
        assert!(!op_valid(AggregatorOp::Sum, AttrType::Ipv4Addr));
        assert!(op_valid(AggregatorOp::Min, AttrType::Timestamp));
        assert!(!op_valid(AggregatorOp::Mean, AttrType::Timestamp));
        assert!(op_valid(AggregatorOp::First, AttrType::FlowKey));
        assert_eq!(default_op(AttrType::Counter64), AggregatorOp::Sum);
        assert_eq!(default_op(AttrType::Float64), AggregatorOp::Mean);
        assert_eq!(default_op(AttrType::Timestamp), AggregatorOp::Min);
        assert_eq!(default_op(AttrType::NodeLoc), AggregatorOp::First);
    }

    #[test]
    fn granularity_needs_one_limit() {
        assert!(GranularitySpec { max_events: None, max_period: None }.validate().is_err());
        assert!(GranularitySpec { max_events: Some(3), max_period: None }.validate().is_ok());
        assert!(GranularitySpec { max_events: None, max_period: Some(SimDuration::from_millis(5)) }
            .validate()
            .is_ok());
    }
}
