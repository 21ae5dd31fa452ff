//! Tiered storage: the partitioned distributed working store with
//! multi-attribute range lookup, retention management and legacy-store
//! indirection. (Short-term per-node buffers live in [`crate::reply`].)
//!
//! Entries are partitioned by (event family × time bucket): the top 16 bits
//! of the event id hashed together with a 16-bit bucket of the event's
//! period start. That bounds per-node load while keeping event families
//! local, and queries fan out only to the owners of buckets intersecting the
//! queried time range.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::aggregation::{eval_filter, FilterConstraint};
use crate::events::{AggMeta, EventRecord, FlowKeySchema, Template};
use crate::overlay::NodeId;
use crate::rng::{fnv1a64, fnv1a64_extend};
use crate::simnet::{SimDuration, SimTime};
use crate::vocabulary::{ConceptId, ConceptPattern};

/// Default time-bucket width for partitioning.
pub const DEFAULT_BUCKET_WIDTH: SimDuration = SimDuration::from_secs(1);

/// Default base lifetime of an untouched entry.
pub const DEFAULT_BASE_TTL: SimDuration = SimDuration::from_secs(30);

/// Partition key of an entry: event family hashed with its 16-bit time
/// bucket. Re-running this on the same entry always re-derives its owner.
pub fn partition_key(event_id: ConceptId, period_start: SimTime, bucket_width: SimDuration) -> u64 {
    partition_key_raw(event_id.family(), bucket_of(period_start, bucket_width))
}

/// Partition key from an explicit (family, bucket) pair; used by query
/// fan-out to enumerate owners.
pub fn partition_key_raw(family: u16, bucket: u16) -> u64 {
    let h = fnv1a64_extend(fnv1a64(b"dws-partition"), &family.to_be_bytes());
    fnv1a64_extend(h, &bucket.to_be_bytes())
}

/// 16-bit (wrapping) time bucket of a timestamp.
pub fn bucket_of(ts: SimTime, bucket_width: SimDuration) -> u16 {
    (ts.as_micros() / bucket_width.as_micros().max(1)) as u16
}

/// Identity of a stored entry: issuer, template, publish timestamp and a
/// digest of the encoded values. Re-inserting the same event is a no-op
/// apart from tag merging.
pub fn values_digest(record: &EventRecord, meta: &AggMeta) -> u64 {
    let mut bytes = Vec::new();
    for v in &record.values {
        v.encode_into(&mut bytes);
    }
    let mut h = fnv1a64_extend(fnv1a64(b"dws-digest"), &record.issuer.0.to_be_bytes());
    h = fnv1a64_extend(h, &record.template_id.to_be_bytes());
    h = fnv1a64_extend(h, &record.event_id.to_be_bytes());
    h = fnv1a64_extend(h, &meta.period_start.as_micros().to_be_bytes());
    fnv1a64_extend(h, &bytes)
}

/// Lifetime policy: a base TTL extended by hints (tags carried by the entry,
/// lookups that touched it, subscriber interest at insertion time). All
/// bonuses are additive, so extending hints never shortens a lifetime.
#[derive(Debug, Clone)]
pub struct RetentionPolicy {
    pub base_ttl: SimDuration,
    pub per_tag_bonus: BTreeMap<ConceptId, SimDuration>,
    pub default_tag_bonus: SimDuration,
    pub per_lookup_bonus: SimDuration,
    pub per_subscriber_bonus: SimDuration,
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self {
            base_ttl: DEFAULT_BASE_TTL,
            per_tag_bonus: BTreeMap::new(),
            default_tag_bonus: SimDuration::ZERO,
            per_lookup_bonus: SimDuration::ZERO,
            per_subscriber_bonus: SimDuration::ZERO,
        }
    }
}

impl RetentionPolicy {
    fn tag_bonus(&self, tag: ConceptId) -> SimDuration {
        self.per_tag_bonus.get(&tag).copied().unwrap_or(self.default_tag_bonus)
    }
}

/// One working-store entry, held by the owner of its partition key.
#[derive(Debug, Clone)]
pub struct DwsEntry {
    pub record: EventRecord,
    pub template: Template,
    pub meta: AggMeta,
    pub tags: BTreeSet<ConceptId>,
    pub inserted_at: SimTime,
    pub expires_at: SimTime,
    pub lookup_count: u32,
    pub owner: NodeId,
}

/// A multi-attribute range query. Attribute constraints use the same grouped
/// semantics as subscription filters; unconstrained attributes are
/// wildcards.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupQuery {
    pub event_pattern: ConceptPattern,
    pub constraints: Vec<FilterConstraint>,
    pub time_from: SimTime,
    pub time_to: SimTime,
}

impl LookupQuery {
    pub fn time_range_valid(&self) -> bool {
        self.time_from <= self.time_to
    }

    fn matches(&self, entry: &DwsEntry, schema: &FlowKeySchema) -> bool {
        self.event_pattern.matches(entry.record.event_id)
            && entry.meta.period_end >= self.time_from
            && entry.meta.period_start <= self.time_to
            && matches!(
                eval_filter(&entry.record, &entry.template, &self.constraints, schema),
                Ok(true)
            )
    }
}

/// Where a lookup result came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResultSource {
    Dws,
    Legacy,
}

/// One merged lookup result.
#[derive(Debug, Clone)]
pub struct LookupResultEntry {
    pub record: EventRecord,
    pub template: Template,
    pub meta: AggMeta,
    pub tags: BTreeSet<ConceptId>,
    pub source: ResultSource,
}

/// The local shard of the distributed working store.
#[derive(Debug, Default)]
pub struct DwsShard {
    entries: BTreeMap<u64, DwsEntry>,
}

impl DwsShard {
    /// Inserts or merges an entry. Insertion is idempotent per (issuer,
    /// template, publish timestamp, values digest); re-inserts merge tags,
    /// and each tag extends the lifetime exactly once.
    #[allow(clippy::too_many_arguments)]
    pub fn insert(
        &mut self,
        record: EventRecord,
        template: Template,
        meta: AggMeta,
        tags: &BTreeSet<ConceptId>,
        subscriber_hint: u32,
        owner: NodeId,
        policy: &RetentionPolicy,
        now: SimTime,
    ) -> bool {
        let digest = values_digest(&record, &meta);
        match self.entries.get_mut(&digest) {
            Some(existing) => {
                for &tag in tags {
                    if existing.tags.insert(tag) {
                        existing.expires_at = existing.expires_at + policy.tag_bonus(tag);
                    }
                }
                false
            }
            None => {
                let mut expires = now
                    + policy.base_ttl
                    + policy.per_subscriber_bonus * subscriber_hint as u64;
                for &tag in tags {
                    expires = expires + policy.tag_bonus(tag);
                }
                self.entries.insert(
                    digest,
                    DwsEntry {
                        record,
                        template,
                        meta,
                        tags: tags.clone(),
                        inserted_at: now,
                        expires_at: expires,
                        lookup_count: 0,
                        owner,
                    },
                );
                true
            }
        }
    }

    /// Runs a query against this shard. Hits bump the lookup count and
    /// extend the lifetime per policy; expired entries never match even if
    /// not yet swept.
    pub fn lookup(
        &mut self,
        query: &LookupQuery,
        schema: &FlowKeySchema,
        policy: &RetentionPolicy,
        now: SimTime,
    ) -> Vec<LookupResultEntry> {
        let mut out = Vec::new();
        for entry in self.entries.values_mut() {
            if entry.expires_at <= now {
                continue;
            }
            if query.matches(entry, schema) {
                entry.lookup_count += 1;
                entry.expires_at = entry.expires_at + policy.per_lookup_bonus;
                out.push(LookupResultEntry {
                    record: entry.record.clone(),
                    template: entry.template.clone(),
                    meta: entry.meta,
                    tags: entry.tags.clone(),
                    source: ResultSource::Dws,
                });
            }
        }
        out
    }

    /// Removes entries whose lifetime has run out; returns the evicted count.
    pub fn sweep(&mut self, now: SimTime) -> usize {
        let before = self.entries.len();
        self.entries.retain(|_, e| e.expires_at > now);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DwsEntry> {
        self.entries.values()
    }

    pub fn get(&self, digest: u64) -> Option<&DwsEntry> {
        self.entries.get(&digest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProviderUnavailable;

impl fmt::Display for ProviderUnavailable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "legacy provider unavailable")
    }
}

/// A record served by a legacy store through its translation daemon.
#[derive(Debug, Clone)]
pub struct LegacyRecord {
    pub record: EventRecord,
    pub template: Template,
    pub meta: AggMeta,
}

pub type LegacyHandler = Box<dyn Fn(&LookupQuery) -> Result<Vec<LegacyRecord>, ProviderUnavailable>>;

/// Location hint for a pre-existing store: queries whose pattern overlaps
/// the declared coverage are forwarded to the provider and the results
/// merged with working-store hits by the lookup proxy.
pub struct LegacyIndirection {
    pub coverage: ConceptPattern,
    pub provider: LegacyHandler,
}

impl fmt::Debug for LegacyIndirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LegacyIndirection").field("coverage", &self.coverage).finish()
    }
}

impl LegacyIndirection {
    /// Two byte-aligned patterns overlap iff the shorter one contains the
    /// longer one's prefix.
    pub fn covers(&self, pattern: ConceptPattern) -> bool {
        let bits = self.coverage.prefix_bits.min(pattern.prefix_bits);
        let short = ConceptPattern { id: self.coverage.id, prefix_bits: bits };
        (pattern.id.0 & short.mask()) == (self.coverage.id.0 & short.mask())
    }
}

/// The set of time buckets a query's range touches, capped at the full
/// 16-bit bucket space.
pub fn buckets_in_range(from: SimTime, to: SimTime, width: SimDuration) -> Vec<u16> {
    let lo = from.as_micros() / width.as_micros().max(1);
    let hi = to.as_micros() / width.as_micros().max(1);
    let span = hi.saturating_sub(lo);
    if span >= u16::MAX as u64 {
        return (0..=u16::MAX).collect();
    }
    let mut out: Vec<u16> = (lo..=hi).map(|b| b as u16).collect();
    out.sort_unstable();
    out.dedup();
    out
}
