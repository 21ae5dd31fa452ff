//! Key-based routing substrate: numeric node ids on a circular 64-bit space,
//! greedy multi-hop routing to the node whose id is closest to the key.
//!
//! Membership is static for a run. Each node keeps its immediate ring
//! neighbours (successors and predecessors) plus finger entries at
//! exponentially spaced clockwise distances; a hop always moves to the
//! candidate strictly closer to the key (circular absolute distance, ties
//! toward the numerically smaller id), so routes are loop-free and terminate
//! at the same node [`Overlay::owner`] computes by brute force.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

/// Overlay node identifier on the 64-bit ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Circular absolute distance between two points on the ring.
pub fn ring_distance(a: u64, b: u64) -> u64 {
    let cw = b.wrapping_sub(a);
    let ccw = a.wrapping_sub(b);
    cw.min(ccw)
}

const SUCCESSORS: usize = 3;
const PREDECESSORS: usize = 2;

#[derive(Debug, Clone, Default)]
struct RoutingTable {
    /// Successors, predecessors and fingers, deduplicated.
    neighbors: BTreeSet<NodeId>,
}

/// Static-membership overlay with per-node routing tables.
#[derive(Debug, Clone)]
pub struct Overlay {
    members: Vec<NodeId>,
    tables: BTreeMap<NodeId, RoutingTable>,
}

impl Overlay {
    /// Builds the overlay for a fixed membership set. Duplicate ids are
    /// collapsed; ids must be unique per node by construction of the caller.
    pub fn new(mut members: Vec<NodeId>) -> Self {
        members.sort_unstable();
        members.dedup();
        let n = members.len();
        let mut tables = BTreeMap::new();
        for (idx, &node) in members.iter().enumerate() {
            let mut neighbors = BTreeSet::new();
            for step in 1..=SUCCESSORS.min(n.saturating_sub(1)) {
                neighbors.insert(members[(idx + step) % n]);
            }
            for step in 1..=PREDECESSORS.min(n.saturating_sub(1)) {
                neighbors.insert(members[(idx + n - step) % n]);
            }
            for bit in 0..64 {
                let target = node.0.wrapping_add(1u64 << bit);
                let finger = Self::successor_of(&members, target);
                if finger != node {
                    neighbors.insert(finger);
                }
            }
            tables.insert(node, RoutingTable { neighbors });
        }
        Self { members, tables }
    }

    /// First member at or clockwise after `point`.
    fn successor_of(sorted: &[NodeId], point: u64) -> NodeId {
        match sorted.binary_search(&NodeId(point)) {
            Ok(i) => sorted[i],
            Err(i) => {
                if i == sorted.len() {
                    sorted[0]
                } else {
                    sorted[i]
                }
            }
        }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.tables.contains_key(&node)
    }

    /// The node owning `key`: minimal circular distance, ties broken toward
    /// the numerically smaller id. Total and deterministic for a fixed
    /// membership set.
    pub fn owner(&self, key: u64) -> NodeId {
        *self
            .members
            .iter()
            .min_by_key(|n| (ring_distance(n.0, key), n.0))
            .expect("overlay has at least one member")
    }

    /// Next hop from `from` toward `key`, or `None` when `from` already owns
    /// the key, using only `from`'s routing table.
    ///
    /// Delivery test: no known neighbour beats `from` on
    /// `(circular distance, id)`. Forwarding takes the neighbour making the
    /// most clockwise progress without passing the key, which at least
    /// halves the remaining clockwise span while table candidates exist;
    /// once none are left, `from` is the key's ring predecessor and the only
    /// remaining hop is to its successor when that side is closer. Clockwise
    /// spans shrink strictly, so routes are loop-free.
    pub fn next_hop(&self, from: NodeId, key: u64) -> Option<NodeId> {
        let table = self.tables.get(&from).expect("routing table for member");
        let my_rank = (ring_distance(from.0, key), from.0);
        let (best_rank, best) = table
            .neighbors
            .iter()
            .map(|n| ((ring_distance(n.0, key), n.0), *n))
            .min()?;
        if best_rank >= my_rank {
            return None;
        }
        let span = key.wrapping_sub(from.0);
        let forward = table
            .neighbors
            .iter()
            .filter(|n| n.0 != from.0 && key.wrapping_sub(n.0) <= span)
            .max_by_key(|n| n.0.wrapping_sub(from.0));
        match forward {
            Some(&f) => Some(f),
            None => Some(best),
        }
    }

    /// Full route from `from` to the owner of `key`, including both ends.
    pub fn path(&self, from: NodeId, key: u64) -> Vec<NodeId> {
        let mut path = alloc::vec![from];
        let mut cur = from;
        while let Some(next) = self.next_hop(cur, key) {
            path.push(next);
            cur = next;
        }
        path
    }
}
