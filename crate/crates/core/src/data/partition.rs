use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{DataError, EncodedDataset};

/// Half-open range of sample IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdRange {
    pub start: u64,
    pub end: u64,
}

impl IdRange {
    pub fn contains(&self, id: u64) -> bool {
        (self.start..self.end).contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub party: u16,
    pub ids: Vec<IdRange>,
}

impl MemberSpec {
    pub fn holds(&self, id: u64) -> bool {
        self.ids.iter().any(|r| r.contains(id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub cluster_id: u16,
    pub columns: Vec<String>,
    pub members: Vec<MemberSpec>,
}

/// Which raw columns the active party and each passive cluster own, and
/// which sample IDs each cluster member holds. The active party is party 0
/// and holds every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub active_columns: Vec<String>,
    pub clusters: Vec<ClusterSpec>,
}

impl PartitionSpec {
    /// Clusters of `members_per_cluster` parties each, numbered from 1 in
    /// cluster order. Members split `[0, n_ids)` into equal contiguous ranges.
    pub fn even_split(
        active_columns: &[&str],
        cluster_columns: &[&[&str]],
        members_per_cluster: u16,
        n_ids: u64,
    ) -> Self {
        assert!(members_per_cluster >= 1);
        let m = members_per_cluster as u64;
        let mut next_party = 1u16;
        let clusters = cluster_columns
            .iter()
            .enumerate()
            .map(|(c, cols)| ClusterSpec {
                cluster_id: c as u16,
                columns: cols.iter().map(|s| s.to_string()).collect(),
                members: (0..m)
                    .map(|k| {
                        let party = next_party;
                        next_party += 1;
                        MemberSpec {
                            party,
                            ids: vec![IdRange {
                                start: n_ids * k / m,
                                end: n_ids * (k + 1) / m,
                            }],
                        }
                    })
                    .collect(),
            })
            .collect();
        PartitionSpec {
            active_columns: active_columns.iter().map(|s| s.to_string()).collect(),
            clusters,
        }
    }

    pub fn from_json(path: &Path) -> Result<Self, DataError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn num_passive(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    pub fn passive_parties(&self) -> Vec<u16> {
        self.clusters
            .iter()
            .flat_map(|c| c.members.iter().map(|m| m.party))
            .collect()
    }

    /// Checks disjointness of column sets and member ID ranges, that every
    /// member ID is a known sample, and party numbering.
    pub fn validate(&self, encoded: &EncodedDataset) -> Result<(), DataError> {
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        let mut claim = |col: &str, who: String| -> Result<(), DataError> {
            if encoded.range(col).is_none() {
                return Err(DataError::CoverageError(format!("column {col:?} is not in the dataset")));
            }
            if let Some(prev) = owner.insert(col.to_string(), who.clone()) {
                return Err(DataError::OverlapError(format!("column {col:?} owned by both {prev} and {who}")));
            }
            Ok(())
        };
        for c in &self.active_columns {
            claim(c, "the active party".into())?;
        }
        for cl in &self.clusters {
            for c in &cl.columns {
                claim(c, format!("cluster {}", cl.cluster_id))?;
            }
        }
        if let Some(r) = encoded.column_map.iter().find(|r| !owner.contains_key(&r.name)) {
            return Err(DataError::CoverageError(format!("column {:?} has no owner", r.name)));
        }

        let n = encoded.sample_ids.len() as u64;
        let mut parties = BTreeSet::new();
        let mut cluster_ids = BTreeSet::new();
        for cl in &self.clusters {
            if !cluster_ids.insert(cl.cluster_id) {
                return Err(DataError::OverlapError(format!("duplicate cluster id {}", cl.cluster_id)));
            }
            let mut seen: Vec<IdRange> = Vec::new();
            for m in &cl.members {
                if m.party == 0 || !parties.insert(m.party) {
                    return Err(DataError::OverlapError(format!("party {} listed twice or is the active party", m.party)));
                }
                for r in &m.ids {
                    if r.start > r.end || r.end > n {
                        return Err(DataError::CoverageError(format!(
                            "party {} holds IDs [{}, {}) outside the active party's [0, {n})",
                            m.party, r.start, r.end
                        )));
                    }
                    if seen.iter().any(|s| s.start < r.end && r.start < s.end) {
                        return Err(DataError::OverlapError(format!(
                            "cluster {} members hold overlapping IDs",
                            cl.cluster_id
                        )));
                    }
                    seen.push(*r);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyShard {
    pub party: u16,
    pub cluster: Option<u16>,
    pub ids: Vec<u64>,
    /// Encoded column indices owned by this party.
    pub columns: Vec<usize>,
    /// `[ids.len() × columns.len()]`, rows aligned with `ids`.
    pub features: Array2<f64>,
}

impl PartyShard {
    pub fn row_index(&self) -> BTreeMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shards {
    pub active: PartyShard,
    /// Labels aligned with `active.ids`.
    pub labels: Vec<f64>,
    pub passive: Vec<PartyShard>,
    pub width: usize,
}

pub fn vertical_split(encoded: &EncodedDataset, spec: &PartitionSpec) -> Result<Shards, DataError> {
    spec.validate(encoded)?;
    let all_rows: Vec<usize> = (0..encoded.sample_ids.len()).collect();
    let active_cols = encoded.columns_of(&spec.active_columns)?;
    let active = PartyShard {
        party: 0,
        cluster: None,
        ids: encoded.sample_ids.clone(),
        features: encoded.matrix.select(Axis(1), &active_cols).select(Axis(0), &all_rows),
        columns: active_cols,
    };
    let mut passive = Vec::new();
    for cl in &spec.clusters {
        let cols = encoded.columns_of(&cl.columns)?;
        let by_cols = encoded.matrix.select(Axis(1), &cols);
        for m in &cl.members {
            let rows: Vec<usize> = all_rows.iter().copied().filter(|&r| m.holds(encoded.sample_ids[r])).collect();
            passive.push(PartyShard {
                party: m.party,
                cluster: Some(cl.cluster_id),
                ids: rows.iter().map(|&r| encoded.sample_ids[r]).collect(),
                features: by_cols.select(Axis(0), &rows),
                columns: cols.clone(),
            });
        }
    }
    Ok(Shards {
        active,
        labels: encoded.labels.clone(),
        passive,
        width: encoded.width(),
    })
}

/// Column-wise inverse of [`vertical_split`]. Cells no party holds stay zero.
pub fn reassemble(shards: &Shards) -> Array2<f64> {
    let n = shards.active.ids.len();
    let mut out = Array2::zeros((n, shards.width));
    let row_of: BTreeMap<u64, usize> = shards.active.row_index();
    for shard in std::iter::once(&shards.active).chain(&shards.passive) {
        for (i, id) in shard.ids.iter().enumerate() {
            let r = row_of[id];
            for (j, &c) in shard.columns.iter().enumerate() {
                out[[r, c]] = shard.features[[i, j]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn dataset() -> EncodedDataset {
        let schema = Schema {
            columns: vec![
                ColumnSpec::categorical("a", &["x", "y"]),
                ColumnSpec::numeric("b", 0.0, 1.0),
                ColumnSpec::categorical("c", &["p", "q", "r"]),
                ColumnSpec::numeric("d", 5.0, 2.0),
            ],
            label: LabelSpec {
                name: "t".into(),
                positive: vec!["1".into()],
            },
            delimiter: None,
        };
        encode(&synth_generate(40, &schema, 11), &schema, None).unwrap()
    }

    #[test]
    fn two_clusters_of_two_reassemble() {
        let enc = dataset();
        let spec = PartitionSpec::even_split(&["a"], &[&["b"], &["c", "d"]], 2, 40);
        let shards = vertical_split(&enc, &spec).unwrap();
        assert_eq!(shards.passive.len(), 4);
        assert_eq!(shards.passive.iter().map(|s| s.party).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(shards.passive[0].ids.len(), 20);
        assert_eq!(shards.passive[3].columns, vec![3, 4, 5, 6]);
        assert_eq!(reassemble(&shards), enc.matrix);
    }

    #[test]
    fn active_only_spec() {
        let enc = dataset();
        let spec = PartitionSpec::even_split(&["a", "b", "c", "d"], &[], 2, 40);
        let shards = vertical_split(&enc, &spec).unwrap();
        assert!(shards.passive.is_empty());
        assert_eq!(shards.active.features, enc.matrix);
    }

    #[test]
    fn overlapping_columns_rejected() {
        let enc = dataset();
        let spec = PartitionSpec::even_split(&["a", "b"], &[&["b"], &["c", "d"]], 2, 40);
        assert!(matches!(vertical_split(&enc, &spec), Err(DataError::OverlapError(_))));
    }

    #[test]
    fn coverage_errors() {
        let enc = dataset();
        let unowned = PartitionSpec::even_split(&["a"], &[&["b"], &["c"]], 2, 40);
        assert!(matches!(vertical_split(&enc, &unowned), Err(DataError::CoverageError(_))));
        let too_many_ids = PartitionSpec::even_split(&["a"], &[&["b"], &["c", "d"]], 2, 41);
        assert!(matches!(vertical_split(&enc, &too_many_ids), Err(DataError::CoverageError(_))));
        let unknown = PartitionSpec::even_split(&["a", "zzz"], &[&["b"], &["c", "d"]], 2, 40);
        assert!(matches!(vertical_split(&enc, &unknown), Err(DataError::CoverageError(_))));
    }

    #[test]
    fn overlapping_member_ids_rejected() {
        let enc = dataset();
        let mut spec = PartitionSpec::even_split(&["a"], &[&["b"], &["c", "d"]], 2, 40);
        spec.clusters[0].members[1].ids[0].start = 10;
        assert!(matches!(vertical_split(&enc, &spec), Err(DataError::OverlapError(_))));
    }

    #[test]
    fn json_round_trip() {
        let spec = PartitionSpec::even_split(&["a"], &[&["b"]], 2, 10);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<PartitionSpec>(&text).unwrap(), spec);
        assert!(serde_json::from_str::<PartitionSpec>(r#"{"active_columns":[],"clusters":[],"x":1}"#).is_err());
    }
}
