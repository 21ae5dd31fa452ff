//! Wire encodings for control messages (subscriptions, replies, lookups,
//! notifications). Data and template messages live in [`crate::events`].
//!
//! Filter constraints share one encoding block between SUBSCRIBE, REPLY and
//! LOOKUP messages: count(2), then per constraint attrId(4) kindTag(1) and
//! the typed bound value(s), each as typeTag(1) + fixed-width payload.

use alloc::vec::Vec;
use core::net::Ipv4Addr;

use crate::aggregation::{AggregatorOp, ConstraintKind, FilterConstraint, GranularitySpec};
use crate::events::{AttrType, AttrValue, CodecError, MSG_REPLY, MSG_SUBSCRIBE};
use crate::pubsub::{SubscriptionSpec, TopicId};
use crate::reply::{ReplyMessage, ZFilter};
use crate::simnet::{SimDuration, SimTime};
use crate::vocabulary::{ConceptId, ConceptPattern};

const KIND_LOWER: u8 = 1;
const KIND_UPPER: u8 = 2;
const KIND_RANGE: u8 = 3;
const KIND_EXACT: u8 = 4;
const KIND_PREFIX: u8 = 5;

fn encode_value(v: &AttrValue, out: &mut Vec<u8>) {
    out.push(v.attr_type() as u8);
    v.encode_into(out);
}

fn decode_value(bytes: &[u8]) -> Result<(AttrValue, &[u8]), CodecError> {
    let (&tag, rest) = bytes.split_first().ok_or(CodecError::Truncated)?;
    let ty = AttrType::from_tag(tag).ok_or(CodecError::UnknownTypeTag(tag))?;
    AttrValue::decode(ty, rest)
}

pub fn encode_constraints(constraints: &[FilterConstraint], out: &mut Vec<u8>) {
    out.extend_from_slice(&(constraints.len() as u16).to_be_bytes());
    for c in constraints {
        out.extend_from_slice(&c.attr_id.to_be_bytes());
        match &c.kind {
            ConstraintKind::Lower(v) => {
                out.push(KIND_LOWER);
                encode_value(v, out);
            }
            ConstraintKind::Upper(v) => {
                out.push(KIND_UPPER);
                encode_value(v, out);
            }
            ConstraintKind::Range(lo, hi) => {
                out.push(KIND_RANGE);
                encode_value(lo, out);
                encode_value(hi, out);
            }
            ConstraintKind::Exact(v) => {
                out.push(KIND_EXACT);
                encode_value(v, out);
            }
            ConstraintKind::Prefix(addr, len) => {
                out.push(KIND_PREFIX);
                out.extend_from_slice(&addr.octets());
                out.push(*len);
            }
        }
    }
}

pub fn decode_constraints(bytes: &[u8]) -> Result<(Vec<FilterConstraint>, &[u8]), CodecError> {
    if bytes.len() < 2 {
        return Err(CodecError::Truncated);
    }
    let count = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
    let mut rest = &bytes[2..];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if rest.len() < 5 {
            return Err(CodecError::Truncated);
        }
        let attr_id = ConceptId(u32::from_be_bytes(rest[..4].try_into().unwrap()));
        let tag = rest[4];
        rest = &rest[5..];
        let kind = match tag {
            KIND_LOWER => {
                let (v, r) = decode_value(rest)?;
                rest = r;
                ConstraintKind::Lower(v)
            }
            KIND_UPPER => {
                let (v, r) = decode_value(rest)?;
                rest = r;
                ConstraintKind::Upper(v)
            }
            KIND_RANGE => {
                let (lo, r) = decode_value(rest)?;
                let (hi, r) = decode_value(r)?;
                rest = r;
                ConstraintKind::Range(lo, hi)
            }
            KIND_EXACT => {
                let (v, r) = decode_value(rest)?;
                rest = r;
                ConstraintKind::Exact(v)
            }
            KIND_PREFIX => {
                if rest.len() < 5 {
                    return Err(CodecError::Truncated);
                }
                let kind = ConstraintKind::Prefix(
                    Ipv4Addr::new(rest[0], rest[1], rest[2], rest[3]),
                    rest[4],
                );
                rest = &rest[5..];
                kind
            }
            other => return Err(CodecError::UnknownTypeTag(other)),
        };
        out.push(FilterConstraint { attr_id, kind });
    }
    Ok((out, rest))
}

/// SUBSCRIBE: kind(1) topic(8) patternId(4) prefixBits(1) maxEvents(4, 0 =
/// none) maxPeriod(8, 0 = none) discardCount(2) discards(4×) opCount(2)
/// (attrId(4) op(1))× constraint block.
pub fn encode_subscribe(topic: TopicId, spec: &SubscriptionSpec) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(MSG_SUBSCRIBE);
    out.extend_from_slice(&topic.0.to_be_bytes());
    out.extend_from_slice(&spec.event_pattern.id.to_be_bytes());
    out.push(spec.event_pattern.prefix_bits);
    out.extend_from_slice(&spec.granularity.max_events.unwrap_or(0).to_be_bytes());
    out.extend_from_slice(
        &spec.granularity.max_period.map(|p| p.as_micros()).unwrap_or(0).to_be_bytes(),
    );
    out.extend_from_slice(&(spec.discards.len() as u16).to_be_bytes());
    for d in &spec.discards {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&(spec.aggregator_ops.len() as u16).to_be_bytes());
    for (attr, op) in &spec.aggregator_ops {
        out.extend_from_slice(&attr.to_be_bytes());
        out.push(*op as u8);
    }
    encode_constraints(&spec.filters, &mut out);
    out
}

pub fn decode_subscribe(bytes: &[u8]) -> Result<(TopicId, SubscriptionSpec), CodecError> {
    if bytes.len() < 1 + 8 + 4 + 1 + 4 + 8 + 2 {
        return Err(CodecError::Truncated);
    }
    if bytes[0] != MSG_SUBSCRIBE {
        return Err(CodecError::WrongMessageKind(bytes[0]));
    }
    let topic = TopicId(u64::from_be_bytes(bytes[1..9].try_into().unwrap()));
    let id = ConceptId(u32::from_be_bytes(bytes[9..13].try_into().unwrap()));
    let prefix_bits = bytes[13];
    let max_events = u32::from_be_bytes(bytes[14..18].try_into().unwrap());
    let max_period = u64::from_be_bytes(bytes[18..26].try_into().unwrap());
    let dcount = u16::from_be_bytes(bytes[26..28].try_into().unwrap()) as usize;
    let mut rest = &bytes[28..];
    let mut discards = Vec::with_capacity(dcount);
    for _ in 0..dcount {
        if rest.len() < 4 {
            return Err(CodecError::Truncated);
        }
        discards.push(ConceptId(u32::from_be_bytes(rest[..4].try_into().unwrap())));
        rest = &rest[4..];
    }
    if rest.len() < 2 {
        return Err(CodecError::Truncated);
    }
    let ocount = u16::from_be_bytes([rest[0], rest[1]]) as usize;
    rest = &rest[2..];
    let mut aggregator_ops = alloc::collections::BTreeMap::new();
    for _ in 0..ocount {
        if rest.len() < 5 {
            return Err(CodecError::Truncated);
        }
        let attr = ConceptId(u32::from_be_bytes(rest[..4].try_into().unwrap()));
        let op = AggregatorOp::from_tag(rest[4]).ok_or(CodecError::UnknownTypeTag(rest[4]))?;
        aggregator_ops.insert(attr, op);
        rest = &rest[5..];
    }
    let (filters, _) = decode_constraints(rest)?;
    Ok((
        topic,
        SubscriptionSpec {
            event_pattern: ConceptPattern { id, prefix_bits },
            filters,
            discards,
            aggregator_ops,
            granularity: GranularitySpec {
                max_events: (max_events != 0).then_some(max_events),
                max_period: (max_period != 0).then_some(SimDuration::from_micros(max_period)),
            },
        },
    ))
}

/// REPLY: kind(1) eventId(4) zfilter(32) timeFrom(8) timeTo(8) tagCount(1)
/// tags(4×) constraint block.
pub fn encode_reply(reply: &ReplyMessage) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(MSG_REPLY);
    out.extend_from_slice(&reply.event_id.to_be_bytes());
    out.extend_from_slice(reply.zfilter.bytes());
    out.extend_from_slice(&reply.time_from.as_micros().to_be_bytes());
    out.extend_from_slice(&reply.time_to.as_micros().to_be_bytes());
    out.push(reply.tags.len() as u8);
    for t in &reply.tags {
        out.extend_from_slice(&t.to_be_bytes());
    }
    encode_constraints(&reply.constraints, &mut out);
    out
}

pub fn decode_reply(bytes: &[u8]) -> Result<ReplyMessage, CodecError> {
    let header = 1 + 4 + ZFilter::BYTES + 8 + 8 + 1;
    if bytes.len() < header {
        return Err(CodecError::Truncated);
    }
    if bytes[0] != MSG_REPLY {
        return Err(CodecError::WrongMessageKind(bytes[0]));
    }
    let event_id = ConceptId(u32::from_be_bytes(bytes[1..5].try_into().unwrap()));
    let zfilter = ZFilter::from_bytes(bytes[5..5 + ZFilter::BYTES].try_into().unwrap());
    let off = 5 + ZFilter::BYTES;
    let time_from = SimTime::from_micros(u64::from_be_bytes(bytes[off..off + 8].try_into().unwrap()));
    let time_to =
        SimTime::from_micros(u64::from_be_bytes(bytes[off + 8..off + 16].try_into().unwrap()));
    let tag_count = bytes[off + 16] as usize;
    let mut rest = &bytes[off + 17..];
    let mut tags = Vec::with_capacity(tag_count);
    for _ in 0..tag_count {
        if rest.len() < 4 {
            return Err(CodecError::Truncated);
        }
        tags.push(ConceptId(u32::from_be_bytes(rest[..4].try_into().unwrap())));
        rest = &rest[4..];
    }
    let (constraints, _) = decode_constraints(rest)?;
    Ok(ReplyMessage { event_id, constraints, time_from, time_to, tags, zfilter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn sample_constraints() -> Vec<FilterConstraint> {
        vec![
            FilterConstraint {
                attr_id: ConceptId(0x0501_0000),
                kind: ConstraintKind::Range(AttrValue::Counter(10), AttrValue::Counter(20)),
            },
            FilterConstraint {
                attr_id: ConceptId(0x0502_0000),
                kind: ConstraintKind::Prefix(Ipv4Addr::new(4, 2, 0, 0), 16),
            },
            FilterConstraint {
                attr_id: ConceptId(0x0503_0000),
                kind: ConstraintKind::Exact(AttrValue::NodeLoc(crate::overlay::NodeId(7))),
            },
        ]
    }

    #[test]
    fn constraint_block_round_trips() {
        let cs = sample_constraints();
        let mut bytes = Vec::new();
        encode_constraints(&cs, &mut bytes);
        let (back, rest) = decode_constraints(&bytes).unwrap();
        assert_eq!(back, cs);
        assert!(rest.is_empty());
    }

    #[test]
    fn subscribe_round_trips() {
        let spec = SubscriptionSpec {
            event_pattern: ConceptPattern { id: ConceptId(0x0101_0000), prefix_bits: 16 },
            filters: sample_constraints(),
            discards: vec![ConceptId(0x0504_0000)],
            aggregator_ops: {
                let mut m = BTreeMap::new();
                m.insert(ConceptId(0x0501_0000), AggregatorOp::Sum);
                m
            },
            granularity: GranularitySpec {
                max_events: Some(10),
                max_period: Some(SimDuration::from_millis(500)),
            },
        };
        let bytes = encode_subscribe(TopicId(0xABCD), &spec);
        let (topic, back) = decode_subscribe(&bytes).unwrap();
        assert_eq!(topic, TopicId(0xABCD));
        assert_eq!(back, spec);
    }

    #[test]
    fn reply_round_trips() {
        let mut zf = ZFilter::default();
        zf.set_bit(3);
        zf.set_bit(200);
        let reply = ReplyMessage {
            event_id: ConceptId(0x0101_0100),
            constraints: sample_constraints(),
            time_from: SimTime::from_micros(1_000),
            time_to: SimTime::from_micros(9_000),
            tags: vec![ConceptId(0x0701_0000), ConceptId(0x0702_0000)],
            zfilter: zf,
        };
        let bytes = encode_reply(&reply);
        assert_eq!(bytes[0], MSG_REPLY);
        assert_eq!(decode_reply(&bytes).unwrap(), reply);
    }
}
