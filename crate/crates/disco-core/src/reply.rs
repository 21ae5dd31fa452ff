//! z-Filters and the local temporary store replies match against.
//!
//! Every link between two peers has an identifier that hashes to a link
//! filter with exactly `k` bits set in an `m`-bit array. Whenever an event
//! crosses a link its filter is OR-ed into the message's z-Filter, and
//! aggregation ORs the filters of the merged inputs, so a delivered message
//! carries the superposed identity of every link between the subscriber and
//! the sources. A reply carrying that superposition can be forwarded
//! backward by testing link-filter containment at each node; false positives
//! are tunable through (m, k) like any Bloom filter.
//!
//! Nodes keep a short-lived circular buffer of the events they published or
//! forwarded; replies match against it to annotate the pre-aggregation
//! copies along the path, which is what elects them into the working store.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use crate::aggregation::{eval_filter, FilterConstraint};
use crate::events::{AggMeta, EventRecord, FlowKeySchema, Template, TemplateKey};
use crate::overlay::NodeId;
use crate::rng::{fnv1a64, fnv1a64_extend};
use crate::simnet::{SimDuration, SimTime};
use crate::vocabulary::ConceptId;

/// Fixed filter width in bits.
pub const ZFILTER_BITS: usize = 256;

/// Bloom-superposed link identifiers accumulated along forwarding paths.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct ZFilter([u8; ZFilter::BYTES]);

impl ZFilter {
    pub const BYTES: usize = ZFILTER_BITS / 8;

    pub fn from_bytes(bytes: [u8; ZFilter::BYTES]) -> Self {
        Self(bytes)
    }

    pub fn bytes(&self) -> &[u8; ZFilter::BYTES] {
        &self.0
    }

    pub fn set_bit(&mut self, idx: usize) {
        debug_assert!(idx < ZFILTER_BITS);
        self.0[idx / 8] |= 1 << (idx % 8);
    }

    pub fn merge(&mut self, other: &ZFilter) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a |= b;
        }
    }

    pub fn or(mut self, other: &ZFilter) -> ZFilter {
        self.merge(other);
        self
    }

    /// True iff every bit of `other` is set in `self`.
    pub fn contains(&self, other: &ZFilter) -> bool {
        self.0.iter().zip(other.0.iter()).all(|(a, b)| a & b == *b)
    }

    pub fn popcount(&self) -> u32 {
        self.0.iter().map(|b| b.count_ones()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }
}

impl fmt::Debug for ZFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ZFilter(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Link-filter parameters: bits set per link and the seed the positions are
/// derived from.
#[derive(Debug, Clone, Copy)]
pub struct ZFilterConfig {
    pub bits_per_link: u8,
    pub salt: u64,
}

impl Default for ZFilterConfig {
    fn default() -> Self {
        Self { bits_per_link: 4, salt: 0 }
    }
}

impl ZFilterConfig {
    /// Filter of the directed link `src -> dst`: exactly `bits_per_link`
    /// distinct bit positions, derived by seeded rehashing. The position
    /// stream comes from a full-avalanche generator keyed by the link hash;
    /// truncating the hash chain itself would correlate positions across
    /// links.
    pub fn link_filter(&self, src: NodeId, dst: NodeId) -> ZFilter {
        let mut filter = ZFilter::default();
        let mut base = fnv1a64_extend(self.salt ^ fnv1a64(b"link"), &src.0.to_be_bytes());
        base = fnv1a64_extend(base, &dst.0.to_be_bytes());
        let mut stream = crate::rng::SplitMix64::new(base);
        let mut chosen = 0u8;
        let mut taken = [false; ZFILTER_BITS];
        while chosen < self.bits_per_link {
            let pos = (stream.next_u64() % ZFILTER_BITS as u64) as usize;
            if !taken[pos] {
                taken[pos] = true;
                filter.set_bit(pos);
                chosen += 1;
            }
        }
        filter
    }
}

/// Annotation reply: routed backward along the z-Filter, tagging matching
/// buffered events at every hop.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplyMessage {
    pub event_id: ConceptId,
    pub constraints: Vec<FilterConstraint>,
    pub time_from: SimTime,
    pub time_to: SimTime,
    pub tags: Vec<ConceptId>,
    pub zfilter: ZFilter,
}

impl ReplyMessage {
    pub fn time_range_valid(&self) -> bool {
        self.time_from <= self.time_to
    }
}

/// One buffered event copy: the message as it crossed this node.
#[derive(Debug, Clone)]
pub struct LtsEntry {
    pub record: EventRecord,
    pub meta: AggMeta,
    pub forwarded_at: SimTime,
    pub tags: BTreeSet<ConceptId>,
}

/// Per-node circular buffer for short-term storage of forwarded events.
/// Entries expire after the configured TTL (a small multiple of edge-to-edge
/// latency) and are evicted FIFO on overflow.
#[derive(Debug)]
pub struct LtsBuffer {
    capacity: usize,
    ttl: SimDuration,
    entries: alloc::collections::VecDeque<LtsEntry>,
}

pub const DEFAULT_LTS_CAPACITY: usize = 4096;

impl LtsBuffer {
    pub fn new(capacity: usize, ttl: SimDuration) -> Self {
        Self { capacity, ttl, entries: alloc::collections::VecDeque::new() }
    }

    pub fn ttl(&self) -> SimDuration {
        self.ttl
    }

    pub fn push(&mut self, record: EventRecord, meta: AggMeta, now: SimTime) {
        while self.entries.len() >= self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(LtsEntry { record, meta, forwarded_at: now, tags: BTreeSet::new() });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LtsEntry> {
        self.entries.iter()
    }

    fn live(&self, entry: &LtsEntry, now: SimTime) -> bool {
        entry.forwarded_at + self.ttl > now
    }

    /// Indices of live entries matching a reply: same event id, formation
    /// period overlapping the reply's time range, and all attribute
    /// constraints satisfied (entries whose template lacks a constrained
    /// attribute do not match).
    pub fn matching_indices<'a>(
        &self,
        reply: &ReplyMessage,
        now: SimTime,
        resolve: impl Fn(TemplateKey) -> Option<&'a Template>,
        schema: &FlowKeySchema,
    ) -> Vec<usize> {
        let mut out = Vec::new();
        for (idx, entry) in self.entries.iter().enumerate() {
            if !self.live(entry, now) {
                continue;
            }
            if entry.record.event_id != reply.event_id {
                continue;
            }
            if entry.meta.period_end < reply.time_from || entry.meta.period_start > reply.time_to {
                continue;
            }
            let Some(template) = resolve(entry.record.template_key()) else { continue };
            if let Ok(true) = eval_filter(&entry.record, template, &reply.constraints, schema) {
                out.push(idx);
            }
        }
        out
    }

    /// Applies tags to an entry; returns the tags that were new.
    pub fn annotate(&mut self, idx: usize, tags: &[ConceptId]) -> Vec<ConceptId> {
        let entry = &mut self.entries[idx];
        tags.iter().copied().filter(|t| entry.tags.insert(*t)).collect()
    }

    pub fn entry(&self, idx: usize) -> &LtsEntry {
        &self.entries[idx]
    }

    /// Drops expired entries from the front (entries sit in arrival order).
    pub fn expire(&mut self, now: SimTime) -> usize {
        let before = self.entries.len();
        while let Some(front) = self.entries.front() {
            if self.live(front, now) {
                break;
            }
            self.entries.pop_front();
        }
        before - self.entries.len()
    }
}
