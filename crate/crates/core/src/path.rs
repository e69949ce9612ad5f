//! From per-sample relevance to a class's neuronal classification path:
//! per-sample top-k lists, occurrence counts over the probe set, and the
//! frequency-ranked neuron set.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::lrp::RelevanceStack;

/// The `k` most relevant neurons of one layer for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedNeuronList {
    pub layer_index: usize,
    pub k: usize,
    /// Width `m` of the analysed layer.
    pub width: usize,
    /// `(relevance, position)` pairs, relevance descending, ties by position.
    pub entries: Vec<(f64, usize)>,
}

pub fn top_k_for_sample(stack: &RelevanceStack, layer_index: usize, k: usize) -> Result<RankedNeuronList> {
    let relevance = stack.layer_relevance(layer_index)?;
    let kind = stack.layer_kinds[layer_index];
    if kind != LayerKind::Dense {
        return Err(Error::NotDense {
            index: layer_index,
            kind: kind.name(),
        });
    }
    let width = relevance.len();
    if k == 0 || k > width {
        return Err(Error::InvalidArgument(format!(
            "k must be in [1, {width}], got {k}"
        )));
    }
    let mut entries: Vec<(f64, usize)> = relevance
        .data()
        .iter()
        .enumerate()
        .map(|(p, &r)| (r, p))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    entries.truncate(k);
    Ok(RankedNeuronList {
        layer_index,
        k,
        width,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    /// Number of lists containing the position.
    pub count: usize,
    /// Relevance of the position summed over those lists.
    pub relevance_sum: f64,
}

/// Occurrence counts of neuron positions over a probe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub layer_index: usize,
    pub k: usize,
    pub width: usize,
    pub probe_count: usize,
    pub counts: BTreeMap<usize, PositionStats>,
}

/// Counts, for every position, the number of lists that contain it.
///
/// The result does not depend on list order: relevance sums are added in
/// sorted order.
pub fn accumulate_frequency(lists: &[RankedNeuronList]) -> Result<FrequencyTable> {
    let first = lists.first().ok_or_else(|| {
        Error::InvalidArgument("cannot accumulate an empty collection of lists".into())
    })?;
    let mut per_position: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for list in lists {
        if list.layer_index != first.layer_index || list.k != first.k || list.width != first.width {
            return Err(Error::InvalidArgument(format!(
                "mismatched lists: layer {} k {} width {} vs layer {} k {} width {}",
                list.layer_index, list.k, list.width, first.layer_index, first.k, first.width
            )));
        }
        for &(r, p) in &list.entries {
            per_position.entry(p).or_default().push(r);
        }
    }
    let counts = per_position
        .into_iter()
        .map(|(p, mut rs)| {
            rs.sort_by(f64::total_cmp);
            (
                p,
                PositionStats {
                    count: rs.len(),
                    relevance_sum: rs.iter().sum(),
                },
            )
        })
        .collect();
    Ok(FrequencyTable {
        layer_index: first.layer_index,
        k: first.k,
        width: first.width,
        probe_count: lists.len(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSetEntry {
    pub position: usize,
    pub count: usize,
    pub relevance_sum: f64,
}

/// Positions ordered by occurrence count (descending), then summed
/// relevance (descending), then position (ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub layer_index: usize,
    pub k: usize,
    pub width: usize,
    pub probe_count: usize,
    pub entries: Vec<NeuronSetEntry>,
}

impl NeuronSet {
    /// Number of distinct positions `z`.
    pub fn z(&self) -> usize {
        self.entries.len()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let set: NeuronSet = serde_json::from_str(json)?;
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let z = self.z();
        if z < self.k || z > self.width {
            return Err(Error::NeuronSetBound {
                z,
                k: self.k,
                width: self.width,
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.position >= self.width || !seen.insert(e.position) {
                return Err(Error::InvalidArgument(format!(
                    "neuron set position {} duplicated or out of range",
                    e.position
                )));
            }
        }
        Ok(())
    }
}

pub fn build_neuron_set(table: &FrequencyTable) -> Result<NeuronSet> {
    if table.counts.is_empty() {
        return Err(Error::InvalidArgument("frequency table is empty".into()));
    }
    let mut entries: Vec<NeuronSetEntry> = table
        .counts
        .iter()
        .map(|(&position, s)| NeuronSetEntry {
            position,
            count: s.count,
            relevance_sum: s.relevance_sum,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.relevance_sum.total_cmp(&a.relevance_sum))
            .then(a.position.cmp(&b.position))
    });
    let set = NeuronSet {
        layer_index: table.layer_index,
        k: table.k,
        width: table.width,
        probe_count: table.probe_count,
        entries,
    };
    set.check()?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub positions: Vec<usize>,
    /// `floor(m_p * m)`
    pub requested: usize,
    /// True when `requested` exceeded `z` and every position of the set was taken.
    pub capped: bool,
}

/// The first `floor(m_p * m)` positions of the neuron set, where `m` is the
/// full layer width.
pub fn select_targets(set: &NeuronSet, m_p: f64) -> Result<TargetSelection> {
    if !(0.0..=1.0).contains(&m_p) {
        return Err(Error::InvalidArgument(format!(
            "m_p must be in [0, 1], got {m_p}"
        )));
    }
    // The small slack keeps e.g. 0.29 * 100 from flooring to 28.
    let requested = ((m_p * set.width as f64) + 1e-9).floor() as usize;
    let capped = requested > set.z();
    if capped {
        warn!(
            "m_p = {m_p} asks for {requested} neurons but the neuron set has only {}; perturbing all of them",
            set.z()
        );
    }
    Ok(TargetSelection {
        positions: set.positions().into_iter().take(requested).collect(),
        requested,
        capped,
    })
}
