//! The three-role training and inference protocol over the in-process
//! star network.
//!
//! Party 0 is the active party, passive parties keep the indices given by
//! the partition and the aggregator takes the next free index. Every
//! training round or testing batch advances one global iteration counter
//! `t`; the key epoch is `t / rotation_period` and a fresh key-agreement
//! phase runs whenever the epoch changes.

mod parties;
mod session;
pub mod wire;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::CryptoError;
use crate::masking::MaskingError;
use crate::model::ModelError;
use crate::transport::{Tag, TransportError};

pub use parties::{ActiveParty, Aggregator, KeyRing, PassiveParty};
pub use session::{Session, SessionData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Pairwise masking, encrypted sample IDs and key rotation.
    #[default]
    Secured,
    /// Same message flow with plaintext payloads. Used as the overhead baseline.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations per key epoch.
    pub rotation_period: u32,
    pub mode: Mode,
    pub seed: u64,
    pub hidden: usize,
    pub scale_bits: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            batch_size: 256,
            lr: 0.01,
            rotation_period: 5,
            mode: Mode::Secured,
            seed: 0,
            hidden: 64,
            scale_bits: 24,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("setup timeout in epoch {epoch}: party {party} sent no public keys")]
    SetupTimeout { epoch: u64, party: u16 },

    #[error("round {round}: missing {tag} from party {party}")]
    MissingContribution { round: u32, party: u16, tag: Tag },

    #[error("round {round}: malformed {tag} from party {party}")]
    Malformed { round: u32, party: u16, tag: Tag },

    #[error("round {round}: party {party}: {source}")]
    Crypto {
        round: u32,
        party: u16,
        #[source]
        source: CryptoError,
    },

    #[error("round {round}: party {party}: {source}")]
    Masking {
        round: u32,
        party: u16,
        #[source]
        source: MaskingError,
    },

    #[error("round {round}: party {party}: {source}")]
    Model {
        round: u32,
        party: u16,
        #[source]
        source: ModelError,
    },

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("invalid session: {0}")]
    Config(String),
}

/// Public structure of the federation, known to every party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub aggregator: u16,
    /// Ascending by cluster id.
    pub clusters: Vec<ClusterInfo>,
    /// Rows of the full first-layer weight matrix owned by the active party.
    pub active_rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterInfo {
    pub id: u16,
    pub members: Vec<u16>,
    /// Rows of the full first-layer weight matrix for this cluster's columns.
    pub rows: Range<usize>,
}

impl Topology {
    /// The active party followed by every passive party, ascending.
    pub fn clients(&self) -> Vec<u16> {
        let mut v = vec![0];
        v.extend(self.passive());
        v
    }

    pub fn passive(&self) -> Vec<u16> {
        let mut v: Vec<u16> = self.clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn cluster_of(&self, party: u16) -> Option<&ClusterInfo> {
        self.clusters.iter().find(|c| c.members.contains(&party))
    }

    /// Parties whose masks cancel in a cluster's gradient sum.
    pub fn backward_group(&self, cluster: &ClusterInfo) -> Vec<u16> {
        let mut g = vec![0];
        g.extend(&cluster.members);
        g
    }

    pub fn total_rows(&self) -> usize {
        self.clusters.last().map_or(self.active_rows.end, |c| c.rows.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub epoch: u64,
    /// Whether a key-agreement phase ran before this round.
    pub setup: bool,
    pub loss: f64,
    pub batch_ids: Vec<u64>,
    /// Sample IDs each passive party learned it holds in this batch.
    pub passive_views: BTreeMap<u16, Vec<u64>>,
    /// Bytes sent plus received by each party during this round.
    pub bytes: BTreeMap<u16, u64>,
    pub cpu_ms: BTreeMap<u16, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub ids: Vec<u64>,
    pub probabilities: Vec<f64>,
    pub labels: Vec<f64>,
    pub accuracy: f64,
    pub auc: f64,
    pub batches: usize,
}

/// Area under the ROC curve by the rank-sum formula, ties averaged.
/// `NaN` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y >= 0.5).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y >= 0.5).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}
