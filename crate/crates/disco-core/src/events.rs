//! Templates, typed attribute values and the wire codec.
//!
//! Data formatting follows the IPFIX idea: a publisher first publishes a
//! *template* binding attribute ids to types, then publishes *data* records
//! carrying just the values in template order. Forwarders rewrite templates
//! as attributes get discarded down the tree, so the template seen by a
//! subscriber usually differs from the published one.
//!
//! All encodings are fixed-width big-endian; the encoded size of a data
//! message is a pure function of its template, which is what makes per-link
//! bandwidth accounting meaningful.

use alloc::vec::Vec;
use core::fmt;
use core::net::Ipv4Addr;

use crate::overlay::NodeId;
use crate::reply::ZFilter;
use crate::simnet::SimTime;
use crate::vocabulary::{ConceptId, VocabError, VocabularyTree};

/// Attribute value types. Tag values are part of the wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AttrType {
    Counter64 = 1,
    Gauge64 = 2,
    Float64 = 3,
    /// Microseconds since the simulation epoch.
    Timestamp = 4,
    Ipv4Addr = 5,
    Ipv4Prefix = 6,
    FlowKey = 7,
    /// Overlay node id of the reporter.
    NodeLoc = 8,
}

impl AttrType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => AttrType::Counter64,
            2 => AttrType::Gauge64,
            3 => AttrType::Float64,
            4 => AttrType::Timestamp,
            5 => AttrType::Ipv4Addr,
            6 => AttrType::Ipv4Prefix,
            7 => AttrType::FlowKey,
            8 => AttrType::NodeLoc,
            _ => return None,
        })
    }

    /// Encoded width in bytes.
    pub fn width(self) -> usize {
        match self {
            AttrType::Counter64
            | AttrType::Gauge64
            | AttrType::Float64
            | AttrType::Timestamp
            | AttrType::NodeLoc => 8,
            AttrType::Ipv4Addr => 4,
            AttrType::Ipv4Prefix => 5,
            AttrType::FlowKey => 13,
        }
    }
}

/// 5-tuple flow identification compound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FlowKey {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.src_addr.octets());
        out.extend_from_slice(&self.dst_addr.octets());
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.push(self.proto);
    }

    pub fn decode(bytes: &[u8]) -> Option<(Self, &[u8])> {
        if bytes.len() < 13 {
            return None;
        }
        let key = FlowKey {
            src_addr: Ipv4Addr::new(bytes[0], bytes[1], bytes[2], bytes[3]),
            dst_addr: Ipv4Addr::new(bytes[4], bytes[5], bytes[6], bytes[7]),
            src_port: u16::from_be_bytes([bytes[8], bytes[9]]),
            dst_port: u16::from_be_bytes([bytes[10], bytes[11]]),
            proto: bytes[12],
        };
        Some((key, &bytes[13..]))
    }
}

/// A typed attribute value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttrValue {
    Counter(u64),
    Gauge(i64),
    Float(f64),
    Timestamp(SimTime),
    Ipv4(Ipv4Addr),
    Ipv4Prefix(Ipv4Addr, u8),
    Flow(FlowKey),
    NodeLoc(NodeId),
}

impl AttrValue {
    pub fn attr_type(&self) -> AttrType {
        match self {
            AttrValue::Counter(_) => AttrType::Counter64,
            AttrValue::Gauge(_) => AttrType::Gauge64,
            AttrValue::Float(_) => AttrType::Float64,
            AttrValue::Timestamp(_) => AttrType::Timestamp,
            AttrValue::Ipv4(_) => AttrType::Ipv4Addr,
            AttrValue::Ipv4Prefix(..) => AttrType::Ipv4Prefix,
            AttrValue::Flow(_) => AttrType::FlowKey,
            AttrValue::NodeLoc(_) => AttrType::NodeLoc,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            AttrValue::Counter(v) => out.extend_from_slice(&v.to_be_bytes()),
            AttrValue::Gauge(v) => out.extend_from_slice(&v.to_be_bytes()),
            AttrValue::Float(v) => out.extend_from_slice(&v.to_bits().to_be_bytes()),
            AttrValue::Timestamp(t) => out.extend_from_slice(&t.as_micros().to_be_bytes()),
            AttrValue::Ipv4(a) => out.extend_from_slice(&a.octets()),
            AttrValue::Ipv4Prefix(a, len) => {
                out.extend_from_slice(&a.octets());
                out.push(*len);
            }
            AttrValue::Flow(k) => k.encode_into(out),
            AttrValue::NodeLoc(n) => out.extend_from_slice(&n.0.to_be_bytes()),
        }
    }

    pub fn decode(ty: AttrType, bytes: &[u8]) -> Result<(Self, &[u8]), CodecError> {
        if bytes.len() < ty.width() {
            return Err(CodecError::Truncated);
        }
        let (head, rest) = bytes.split_at(ty.width());
        let value = match ty {
            AttrType::Counter64 => AttrValue::Counter(u64::from_be_bytes(head.try_into().unwrap())),
            AttrType::Gauge64 => AttrValue::Gauge(i64::from_be_bytes(head.try_into().unwrap())),
            AttrType::Float64 => {
                AttrValue::Float(f64::from_bits(u64::from_be_bytes(head.try_into().unwrap())))
            }
            AttrType::Timestamp => {
                AttrValue::Timestamp(SimTime::from_micros(u64::from_be_bytes(head.try_into().unwrap())))
            }
            AttrType::Ipv4Addr => AttrValue::Ipv4(Ipv4Addr::new(head[0], head[1], head[2], head[3])),
            AttrType::Ipv4Prefix => {
                AttrValue::Ipv4Prefix(Ipv4Addr::new(head[0], head[1], head[2], head[3]), head[4])
            }
            AttrType::FlowKey => {
                let (key, _) = FlowKey::decode(head).ok_or(CodecError::Truncated)?;
                AttrValue::Flow(key)
            }
            AttrType::NodeLoc => AttrValue::NodeLoc(NodeId(u64::from_be_bytes(head.try_into().unwrap()))),
        };
        Ok((value, rest))
    }

    /// Ordering between two values of the same type. `None` when the types
    /// differ or the type has no meaningful order (flow keys order
    /// lexicographically so MIN/MAX stay total).
    pub fn cmp_same_type(&self, other: &AttrValue) -> Option<core::cmp::Ordering> {
        use AttrValue::*;
        match (self, other) {
            (Counter(a), Counter(b)) => Some(a.cmp(b)),
            (Gauge(a), Gauge(b)) => Some(a.cmp(b)),
            (Float(a), Float(b)) => a.partial_cmp(b),
            (Timestamp(a), Timestamp(b)) => Some(a.cmp(b)),
            (Ipv4(a), Ipv4(b)) => Some(a.cmp(b)),
            (Ipv4Prefix(a, la), Ipv4Prefix(b, lb)) => Some((a, la).cmp(&(b, lb))),
            (Flow(a), Flow(b)) => Some(a.cmp(b)),
            (NodeLoc(a), NodeLoc(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }
}

/// Format descriptor for published events of one kind from one issuer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub issuer: NodeId,
    pub template_id: u16,
    pub event_id: ConceptId,
    /// Attribute ids must be distinct; list order defines value order in
    /// data messages.
    pub fields: Vec<(ConceptId, AttrType)>,
}

impl Template {
    pub fn key(&self) -> TemplateKey {
        TemplateKey { issuer: self.issuer, template_id: self.template_id }
    }

    pub fn field_index(&self, attr: ConceptId) -> Option<usize> {
        self.fields.iter().position(|(a, _)| *a == attr)
    }

    pub fn field_type(&self, attr: ConceptId) -> Option<AttrType> {
        self.fields.iter().find(|(a, _)| *a == attr).map(|(_, t)| *t)
    }

    /// Encoded size of a data message under this template.
    pub fn data_len(&self) -> usize {
        DATA_HEADER_LEN + self.fields.iter().map(|(_, t)| t.width()).sum::<usize>()
    }
}

/// (issuer, template id) — the unit of template identity system-wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TemplateKey {
    pub issuer: NodeId,
    pub template_id: u16,
}

/// One published (or aggregated) event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub event_id: ConceptId,
    pub template_id: u16,
    pub issuer: NodeId,
    pub values: Vec<AttrValue>,
}

impl EventRecord {
    pub fn template_key(&self) -> TemplateKey {
        TemplateKey { issuer: self.issuer, template_id: self.template_id }
    }

    pub fn value_of(&self, template: &Template, attr: ConceptId) -> Option<&AttrValue> {
        template.field_index(attr).and_then(|i| self.values.get(i))
    }
}

/// Aggregation context travelling with every data message: how many base
/// events the record stands for and the formation window at the emitting
/// node. Base events carry `base_count = 1` and a zero-length period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggMeta {
    pub base_count: u32,
    pub period_start: SimTime,
    pub period_end: SimTime,
}

impl AggMeta {
    pub fn base(ts: SimTime) -> Self {
        Self { base_count: 1, period_start: ts, period_end: ts }
    }
}

/// A data message as it travels: record, aggregation meta and the z-Filter
/// accumulated over the links crossed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMessage {
    pub record: EventRecord,
    pub meta: AggMeta,
    pub zfilter: ZFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecError {
    Truncated,
    UnknownTypeTag(u8),
    /// Value count or kinds do not match the template.
    TemplateMismatch,
    WrongMessageKind(u8),
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::Truncated => write!(f, "message truncated"),
            CodecError::UnknownTypeTag(t) => write!(f, "unknown attribute type tag 0x{t:02x}"),
            CodecError::TemplateMismatch => write!(f, "data does not match template"),
            CodecError::WrongMessageKind(k) => write!(f, "unexpected message kind 0x{k:02x}"),
        }
    }
}

pub const MSG_SUBSCRIBE: u8 = 0x01;
pub const MSG_TEMPLATE: u8 = 0x02;
pub const MSG_DATA: u8 = 0x03;
pub const MSG_NO_SUBSCRIBER: u8 = 0x04;
pub const MSG_SUBSCRIBERS_READY: u8 = 0x05;
pub const MSG_REPLY: u8 = 0x06;
pub const MSG_LOOKUP: u8 = 0x07;
pub const MSG_LOOKUP_RESULT: u8 = 0x08;
pub const MSG_DWS_INSERT: u8 = 0x09;

/// Template message: kind(1) issuer(8) templateId(2) eventId(4)
/// fieldCount(2) then fieldCount × (attrId(4) typeTag(1)).
pub const TEMPLATE_HEADER_LEN: usize = 1 + 8 + 2 + 4 + 2;

/// Data message header: kind(1) issuer(8) templateId(2) eventId(4)
/// baseCount(4) periodStart(8) periodEnd(8) zfilter(32).
pub const DATA_HEADER_LEN: usize = 1 + 8 + 2 + 4 + 4 + 8 + 8 + ZFilter::BYTES;

pub fn encode_template(t: &Template) -> Vec<u8> {
    let mut out = Vec::with_capacity(TEMPLATE_HEADER_LEN + 5 * t.fields.len());
    out.push(MSG_TEMPLATE);
    out.extend_from_slice(&t.issuer.0.to_be_bytes());
    out.extend_from_slice(&t.template_id.to_be_bytes());
    out.extend_from_slice(&t.event_id.to_be_bytes());
    out.extend_from_slice(&(t.fields.len() as u16).to_be_bytes());
    for (attr, ty) in &t.fields {
        out.extend_from_slice(&attr.to_be_bytes());
        out.push(*ty as u8);
    }
    out
}

pub fn decode_template(bytes: &[u8]) -> Result<Template, CodecError> {
    if bytes.len() < TEMPLATE_HEADER_LEN {
        return Err(CodecError::Truncated);
    }
    if bytes[0] != MSG_TEMPLATE {
        return Err(CodecError::WrongMessageKind(bytes[0]));
    }
    let issuer = NodeId(u64::from_be_bytes(bytes[1..9].try_into().unwrap()));
    let template_id = u16::from_be_bytes(bytes[9..11].try_into().unwrap());
    let event_id = ConceptId(u32::from_be_bytes(bytes[11..15].try_into().unwrap()));
    let count = u16::from_be_bytes(bytes[15..17].try_into().unwrap()) as usize;
    let mut rest = &bytes[17..];
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        if rest.len() < 5 {
            return Err(CodecError::Truncated);
        }
        let attr = ConceptId(u32::from_be_bytes(rest[..4].try_into().unwrap()));
        let ty = AttrType::from_tag(rest[4]).ok_or(CodecError::UnknownTypeTag(rest[4]))?;
        fields.push((attr, ty));
        rest = &rest[5..];
    }
    Ok(Template { issuer, template_id, event_id, fields })
}

pub fn encode_data(msg: &DataMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(DATA_HEADER_LEN + 8 * msg.record.values.len());
    out.push(MSG_DATA);
    out.extend_from_slice(&msg.record.issuer.0.to_be_bytes());
    out.extend_from_slice(&msg.record.template_id.to_be_bytes());
    out.extend_from_slice(&msg.record.event_id.to_be_bytes());
    out.extend_from_slice(&msg.meta.base_count.to_be_bytes());
    out.extend_from_slice(&msg.meta.period_start.as_micros().to_be_bytes());
    out.extend_from_slice(&msg.meta.period_end.as_micros().to_be_bytes());
    out.extend_from_slice(msg.zfilter.bytes());
    for v in &msg.record.values {
        v.encode_into(&mut out);
    }
    out
}

pub fn decode_data(bytes: &[u8], template: &Template) -> Result<DataMessage, CodecError> {
    if bytes.len() < DATA_HEADER_LEN {
        return Err(CodecError::Truncated);
    }
    if bytes[0] != MSG_DATA {
        return Err(CodecError::WrongMessageKind(bytes[0]));
    }
    let issuer = NodeId(u64::from_be_bytes(bytes[1..9].try_into().unwrap()));
    let template_id = u16::from_be_bytes(bytes[9..11].try_into().unwrap());
    let event_id = ConceptId(u32::from_be_bytes(bytes[11..15].try_into().unwrap()));
    if issuer != template.issuer || template_id != template.template_id {
        return Err(CodecError::TemplateMismatch);
    }
    let base_count = u32::from_be_bytes(bytes[15..19].try_into().unwrap());
    let period_start = SimTime::from_micros(u64::from_be_bytes(bytes[19..27].try_into().unwrap()));
    let period_end = SimTime::from_micros(u64::from_be_bytes(bytes[27..35].try_into().unwrap()));
    let zfilter = ZFilter::from_bytes(bytes[35..35 + ZFilter::BYTES].try_into().unwrap());
    let mut rest = &bytes[DATA_HEADER_LEN..];
    let mut values = Vec::with_capacity(template.fields.len());
    for (_, ty) in &template.fields {
        let (v, r) = AttrValue::decode(*ty, rest)?;
        values.push(v);
        rest = r;
    }
    if !rest.is_empty() {
        return Err(CodecError::TemplateMismatch);
    }
    Ok(DataMessage {
        record: EventRecord { event_id, template_id, issuer, values },
        meta: AggMeta { base_count, period_start, period_end },
        zfilter,
    })
}

/// Checks that a record's values line up with its template.
pub fn conforms(record: &EventRecord, template: &Template) -> bool {
    record.template_key() == template.key()
        && record.event_id == template.event_id
        && record.values.len() == template.fields.len()
        && record
            .values
            .iter()
            .zip(&template.fields)
            .all(|(v, (_, ty))| v.attr_type() == *ty)
}

/// Component selectors of the flow-key compound. The schema ties the
/// vocabulary's `attribute.flow.*` concepts to the fields of [`FlowKey`] so
/// filters can constrain individual components of a compound value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowKeySchema {
    pub src_addr: ConceptId,
    pub dst_addr: ConceptId,
    pub src_port: ConceptId,
    pub dst_port: ConceptId,
    pub proto: ConceptId,
}

/// Canonical component paths of the flow-key compound.
pub const FLOW_SRC_ADDR_PATH: &str = "attribute.flow.rfc791-source-address";
pub const FLOW_DST_ADDR_PATH: &str = "attribute.flow.rfc791-destination-address";
pub const FLOW_SRC_PORT_PATH: &str = "attribute.flow.source-port";
pub const FLOW_DST_PORT_PATH: &str = "attribute.flow.destination-port";
pub const FLOW_PROTO_PATH: &str = "attribute.flow.transport-protocol";

impl FlowKeySchema {
    /// Registers (idempotently) the component concepts and builds the schema.
    pub fn register(vocab: &mut VocabularyTree) -> Result<Self, VocabError> {
        Ok(Self {
            src_addr: vocab.register_str(FLOW_SRC_ADDR_PATH)?,
            dst_addr: vocab.register_str(FLOW_DST_ADDR_PATH)?,
            src_port: vocab.register_str(FLOW_SRC_PORT_PATH)?,
            dst_port: vocab.register_str(FLOW_DST_PORT_PATH)?,
            proto: vocab.register_str(FLOW_PROTO_PATH)?,
        })
    }

    /// Looks the component concepts up in an already-built vocabulary.
    pub fn from_vocabulary(vocab: &VocabularyTree) -> Result<Self, VocabError> {
        Ok(Self {
            src_addr: vocab.id_of(FLOW_SRC_ADDR_PATH)?,
            dst_addr: vocab.id_of(FLOW_DST_ADDR_PATH)?,
            src_port: vocab.id_of(FLOW_SRC_PORT_PATH)?,
            dst_port: vocab.id_of(FLOW_DST_PORT_PATH)?,
            proto: vocab.id_of(FLOW_PROTO_PATH)?,
        })
    }

    pub fn is_component(&self, attr: ConceptId) -> bool {
        attr == self.src_addr
            || attr == self.dst_addr
            || attr == self.src_port
            || attr == self.dst_port
            || attr == self.proto
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnknownComponent(pub ConceptId);

/// Extracts one named component of a flow key for filter evaluation.
pub fn extract_component(
    key: &FlowKey,
    component: ConceptId,
    schema: &FlowKeySchema,
) -> Result<AttrValue, UnknownComponent> {
    if component == schema.src_addr {
        Ok(AttrValue::Ipv4(key.src_addr))
    } else if component == schema.dst_addr {
        Ok(AttrValue::Ipv4(key.dst_addr))
    } else if component == schema.src_port {
        Ok(AttrValue::Counter(key.src_port as u64))
    } else if component == schema.dst_port {
        Ok(AttrValue::Counter(key.dst_port as u64))
    } else if component == schema.proto {
        Ok(AttrValue::Counter(key.proto as u64))
    } else {
        Err(UnknownComponent(component))
    }
}
