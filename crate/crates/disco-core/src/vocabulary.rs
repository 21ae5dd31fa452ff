//! Vocabulary tree: hierarchical concept registration with prefix-preserving
//! numeric identifiers and wildcard pattern matching.
//!
//! Concepts live in an IS-A tree ("event.network.drops" is a kind of
//! "event.network"). Each registered concept gets a 32-bit id made of four
//! 8-bit level fields; a child shares its parent's prefix fields, so subtree
//! subscriptions reduce to prefix masks, much like IP address blocks. Level
//! value `0x00` is reserved and means "unallocated below here", which keeps
//! the id of a depth-d concept identical to its own d-level prefix.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// Maximum tree depth: four 8-bit level fields in a 32-bit id.
pub const MAX_DEPTH: usize = 4;

/// A dotted concept name, e.g. `event.network.drops`; may end in a `*`
/// wildcard segment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConceptPath {
    segments: Vec<String>,
    wildcard: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VocabError {
    /// Empty path, empty token or a wildcard anywhere but the end.
    MalformedPath,
    DepthExceeded,
    /// 256th sibling requested at some level; 0x00 is reserved.
    LevelExhausted,
    UnknownPath,
    /// A wildcard path was passed where a concrete one is required.
    WildcardNotAllowed,
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::MalformedPath => write!(f, "malformed concept path"),
            VocabError::DepthExceeded => write!(f, "concept path deeper than {} levels", MAX_DEPTH),
            VocabError::LevelExhausted => write!(f, "no free sibling id at this level"),
            VocabError::UnknownPath => write!(f, "path not registered"),
            VocabError::WildcardNotAllowed => write!(f, "wildcard path not allowed here"),
        }
    }
}

impl ConceptPath {
    /// Builds a path from explicit segments. An optional single trailing `*`
    /// marks a wildcard. Depth is not bounded here; `register` enforces it.
    pub fn from_segments<I, S>(segments: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut segs: Vec<String> = segments.into_iter().map(Into::into).collect();
        let wildcard = segs.last().map(|s| s == "*").unwrap_or(false);
        if wildcard {
            segs.pop();
        }
        if segs.is_empty() {
            return Err(VocabError::MalformedPath);
        }
        for s in &segs {
            if s.is_empty() || s == "*" {
                return Err(VocabError::MalformedPath);
            }
        }
        Ok(Self { segments: segs, wildcard })
    }

    /// Parses a dotted path. Names deeper than [`MAX_DEPTH`] are folded:
    /// the entire remaining suffix becomes the deepest level's token, so
    /// `event.network.drops.forwarding.rfc791-ttl-exceeded` occupies four
    /// levels, the last of which is `forwarding.rfc791-ttl-exceeded`.
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut raw: Vec<&str> = text.split('.').collect();
        let wildcard = raw.last().map(|s| *s == "*").unwrap_or(false);
        if wildcard {
            raw.pop();
        }
        if raw.is_empty() {
            return Err(VocabError::MalformedPath);
        }
        let mut segs: Vec<String> = Vec::new();
        if raw.len() > MAX_DEPTH {
            for s in &raw[..MAX_DEPTH - 1] {
                segs.push((*s).to_string());
            }
            segs.push(raw[MAX_DEPTH - 1..].join("."));
        } else {
            for s in &raw {
                segs.push((*s).to_string());
            }
        }
        let mut path = Self::from_segments(segs)?;
        path.wildcard = wildcard;
        Ok(path)
    }

    pub fn is_wildcard(&self) -> bool {
        self.wildcard
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    /// Depth of the named (non-wildcard) prefix.
    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    /// The same path with the wildcard marker stripped.
    pub fn named_prefix(&self) -> ConceptPath {
        ConceptPath { segments: self.segments.clone(), wildcard: false }
    }

    pub fn dotted(&self) -> String {
        let mut s = self.segments.join(".");
        if self.wildcard {
            s.push_str(".*");
        }
        s
    }
}

impl fmt::Display for ConceptPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.dotted())
    }
}

/// 32-bit concept identifier: four 8-bit level fields, high byte first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ConceptId(pub u32);

impl ConceptId {
    pub fn level(self, idx: usize) -> u8 {
        debug_assert!(idx < MAX_DEPTH);
        (self.0 >> (24 - 8 * idx)) as u8
    }

    /// Number of populated levels (leading nonzero bytes).
    pub fn depth(self) -> usize {
        (0..MAX_DEPTH).take_while(|&i| self.level(i) != 0).count()
    }

    /// Top 16 bits; the topic oracle's grouping granularity.
    pub fn family(self) -> u16 {
        (self.0 >> 16) as u16
    }

    pub fn to_be_bytes(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

/// A concept id with a byte-aligned prefix length: the numeric form of a
/// (possibly wildcard) subscription pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConceptPattern {
    pub id: ConceptId,
    pub prefix_bits: u8,
}

impl ConceptPattern {
    /// Exact-match pattern for a single id.
    pub fn exact(id: ConceptId) -> Self {
        Self { id, prefix_bits: 32 }
    }

    pub fn mask(self) -> u32 {
        debug_assert!(matches!(self.prefix_bits, 8 | 16 | 24 | 32));
        (!0u32) << (32 - self.prefix_bits as u32)
    }

    /// True iff the top `prefix_bits` of `id` equal the pattern's id.
    pub fn matches(self, id: ConceptId) -> bool {
        (id.0 & self.mask()) == self.id.0
    }
}

impl fmt::Display for ConceptPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.id, self.prefix_bits)
    }
}

#[derive(Debug, Clone, Default)]
struct TreeNode {
    children: BTreeMap<String, u8>,
    next_child: u8,
}

/// The vocabulary tree: a bijection between registered paths and ids, with
/// deterministic order-of-registration allocation (counters start at 0x01
/// per level). Built once before a run and shared read-only afterwards.
#[derive(Debug, Clone)]
pub struct VocabularyTree {
    nodes: BTreeMap<ConceptId, TreeNode>,
    by_path: BTreeMap<Vec<String>, ConceptId>,
    by_id: BTreeMap<ConceptId, ConceptPath>,
}

impl Default for VocabularyTree {
    fn default() -> Self {
        Self::new()
    }
}

impl VocabularyTree {
    pub fn new() -> Self {
        let mut nodes = BTreeMap::new();
        // Root pseudo-node (id 0) owns the depth-1 counter.
        nodes.insert(ConceptId(0), TreeNode { children: BTreeMap::new(), next_child: 1 });
        Self { nodes, by_path: BTreeMap::new(), by_id: BTreeMap::new() }
    }

    /// Registers a concrete path, allocating ids for any unregistered
    /// ancestors on the way down. Idempotent for an already-registered path.
    pub fn register(&mut self, path: &ConceptPath) -> Result<ConceptId, VocabError> {
        if path.is_wildcard() {
            return Err(VocabError::WildcardNotAllowed);
        }
        if path.depth() > MAX_DEPTH {
            return Err(VocabError::DepthExceeded);
        }
        let mut parent = ConceptId(0);
        let mut id = ConceptId(0);
        for (level, seg) in path.segments().iter().enumerate() {
            let node = self.nodes.get_mut(&parent).expect("parent node exists");
            let field = match node.children.get(seg) {
                Some(&f) => f,
                None => {
                    if node.next_child == 0 {
                        // Counter wrapped: 255 siblings already allocated.
                        return Err(VocabError::LevelExhausted);
                    }
                    let f = node.next_child;
                    node.next_child = node.next_child.wrapping_add(1);
                    node.children.insert(seg.clone(), f);
                    f
                }
            };
            id = ConceptId(id.0 | (field as u32) << (24 - 8 * level));
            if let alloc::collections::btree_map::Entry::Vacant(slot) = self.nodes.entry(id) {
                slot.insert(TreeNode { children: BTreeMap::new(), next_child: 1 });
                let registered = ConceptPath {
                    segments: path.segments()[..=level].to_vec(),
                    wildcard: false,
                };
                self.by_path.insert(registered.segments.clone(), id);
                self.by_id.insert(id, registered);
            }
            parent = id;
        }
        Ok(id)
    }

    pub fn register_str(&mut self, text: &str) -> Result<ConceptId, VocabError> {
        self.register(&ConceptPath::parse(text)?)
    }

    /// Translates a path to its numeric pattern. A trailing wildcard yields
    /// prefix length 8 × depth of the named prefix; a concrete path yields
    /// an exact /32 pattern.
    pub fn resolve(&self, path: &ConceptPath) -> Result<ConceptPattern, VocabError> {
        let id = self
            .by_path
            .get(path.segments())
            .copied()
            .ok_or(VocabError::UnknownPath)?;
        if path.is_wildcard() {
            Ok(ConceptPattern { id, prefix_bits: (8 * path.depth()) as u8 })
        } else {
            Ok(ConceptPattern::exact(id))
        }
    }

    pub fn resolve_str(&self, text: &str) -> Result<ConceptPattern, VocabError> {
        self.resolve(&ConceptPath::parse(text)?)
    }

    /// Exact id of a concrete registered path.
    pub fn id_of(&self, text: &str) -> Result<ConceptId, VocabError> {
        let path = ConceptPath::parse(text)?;
        if path.is_wildcard() {
            return Err(VocabError::WildcardNotAllowed);
        }
        Ok(self.resolve(&path)?.id)
    }

    /// Inverse lookup.
    pub fn name(&self, id: ConceptId) -> Option<&ConceptPath> {
        self.by_id.get(&id)
    }

    /// All registered (path, id) pairs in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&ConceptPath, ConceptId)> {
        self.by_id.iter().map(|(id, path)| (path, *id))
    }

    /// Distinct 16-bit family prefixes of registered ids matching `pattern`.
    /// Used by the topic oracle for coarse patterns and by store fan-out.
    pub fn families_matching(&self, pattern: ConceptPattern) -> Vec<u16> {
        let mut fams: Vec<u16> = self
            .by_id
            .keys()
            .filter(|id| pattern.matches(**id))
            .map(|id| id.family())
            .collect();
        fams.dedup();
        fams
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
