//! Local membership view of one chunk group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::Digest256;
use crate::crypto::NodeId;
use crate::selection::SelectionProof;

use super::messages::MemberRecord;
use super::Millis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub fragment_index: u64,
    pub proof: SelectionProof,
    /// Local time of the last accepted claim (or other liveness evidence).
    pub last_claim: Millis,
    /// Local time the member first entered this view.
    pub first_seen: Millis,
    /// Highest sender timestamp seen in a claim; older claims are replays.
    pub claim_ts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupView {
    pub chunk_hash: Digest256,
    pub members: BTreeMap<NodeId, Member>,
}

impl GroupView {
    pub fn new(chunk_hash: Digest256) -> GroupView {
        GroupView {
            chunk_hash,
            members: BTreeMap::new(),
        }
    }

    pub fn is_alive(&self, id: &NodeId, now: Millis, liveness_timeout: Millis) -> bool {
        self.members
            .get(id)
            .is_some_and(|m| now.saturating_sub(m.last_claim) <= liveness_timeout)
    }

    pub fn alive_count(&self, now: Millis, liveness_timeout: Millis) -> usize {
        self.members
            .values()
            .filter(|m| now.saturating_sub(m.last_claim) <= liveness_timeout)
            .count()
    }

    /// Inserts or refreshes a member. Returns true when it was new.
    pub fn upsert(&mut self, fragment_index: u64, proof: SelectionProof, now: Millis) -> bool {
        let id = proof.node_id();
        match self.members.get_mut(&id) {
            Some(m) => {
                m.fragment_index = fragment_index;
                m.last_claim = m.last_claim.max(now);
                false
            }
            None => {
                self.members.insert(
                    id,
                    Member {
                        fragment_index,
                        proof,
                        last_claim: now,
                        first_seen: now,
                        claim_ts: 0,
                    },
                );
                true
            }
        }
    }

    /// Drops members whose last claim is older than the timeout, keeping
    /// `keep` (the local node) regardless.
    pub fn expire(&mut self, now: Millis, liveness_timeout: Millis, keep: &NodeId) -> Vec<NodeId> {
        let stale: Vec<NodeId> = self
            .members
            .iter()
            .filter(|(id, m)| *id != keep && now.saturating_sub(m.last_claim) > liveness_timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in &stale {
            self.members.remove(id);
        }
        stale
    }

    pub fn records(&self) -> Vec<MemberRecord> {
        self.members
            .values()
            .map(|m| MemberRecord {
                fragment_index: m.fragment_index,
                proof: m.proof.clone(),
            })
            .collect()
    }

    pub fn has_index(&self, idx: u64) -> bool {
        self.members.values().any(|m| m.fragment_index == idx)
    }
}

/// Serializable summary of a view, as reported to operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub chunk_hash: Digest256,
    pub reporter: NodeId,
    pub is_member: bool,
    pub alive: usize,
    pub members: Vec<MemberReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub node_id: NodeId,
    pub fragment_index: u64,
    pub alive: bool,
    pub age_ms: u64,
    pub since_claim_ms: u64,
}
