//! Score fusion and pixel-level OOD metrics.
//!
//! OOD is the positive class throughout. Metrics operate on pooled pixel
//! populations; rank statistics are computed from integer counts so they are
//! exactly reproducible.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensorgrid::{mean_std, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Label {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum IdSubtype {
    Normal,
    Hard,
}

/// One score per pixel with its ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    /// Ground-truth normal/hard split of ID pixels; ignored for OOD entries.
    pub id_subtype: Option<Vec<IdSubtype>>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        let s = LabeledScores {
            scores,
            labels,
            id_subtype: None,
        };
        s.check_shape()?;
        Ok(s)
    }

    fn check_shape(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::contract(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if let Some(sub) = &self.id_subtype {
            if sub.len() != self.scores.len() {
                return Err(Error::contract("id_subtype length differs from scores"));
            }
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::contract("scores must be finite"));
        }
        Ok(())
    }

    /// Shape check plus the presence of both classes.
    fn validate(&self) -> Result<(usize, usize)> {
        self.check_shape()?;
        let n_ood = self.labels.iter().filter(|&&l| l == Label::Ood).count();
        let n_id = self.labels.len() - n_ood;
        if n_ood == 0 || n_id == 0 {
            return Err(Error::contract(format!(
                "metrics need both classes, got {n_id} ID and {n_ood} OOD entries"
            )));
        }
        Ok((n_id, n_ood))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Entries sorted by descending score.
    fn descending(&self) -> Vec<(f64, Label)> {
        let mut v: Vec<(f64, Label)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }
}

/// Splits a descending list into runs of equal score; yields (ood, id) counts.
fn tie_groups(sorted: &[(f64, Label)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0, 0);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            match sorted[j].1 {
                Label::Ood => pos += 1,
                Label::Id => neg += 1,
            }
            j += 1;
        }
        out.push((pos, neg));
        i = j;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub fpr95: f64,
    pub ap: f64,
}

/// Mann-Whitney AUROC: P(OOD score > ID score) with ties counted one half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let (n_id, n_ood) = data.validate()?;
    let sorted = data.descending();
    // Walk from the top; every ID entry below the current group is a win.
    let mut id_above = 0u128;
    let mut twice_wins = 0u128;
    for (pos, neg) in tie_groups(&sorted) {
        let below = n_id as u128 - id_above - neg as u128;
        twice_wins += pos as u128 * (2 * below + neg as u128);
        id_above += neg as u128;
    }
    Ok(twice_wins as f64 / (2 * n_id as u128 * n_ood as u128) as f64)
}

/// Number of OOD entries that must score at or above the threshold for 95% TPR.
pub(crate) fn tpr95_count(n_ood: usize) -> usize {
    (95 * n_ood).div_ceil(100)
}

/// FPR at 95% TPR. The threshold is the largest score `t` with at least 95%
/// of OOD scores `>= t`; the FPR is the fraction of ID scores `>= t`.
pub fn fpr_at_95_tpr(data: &LabeledScores) -> Result<(f64, f64)> {
    let (n_id, n_ood) = data.validate()?;
    let mut ood: Vec<f64> = data
        .scores
        .iter()
        .zip(&data.labels)
        .filter(|(_, &l)| l == Label::Ood)
        .map(|(&s, _)| s)
        .collect();
    ood.sort_by(|a, b| b.total_cmp(a));
    let k = tpr95_count(n_ood).max(1);
    let threshold = ood[k - 1];
    let fp = data
        .scores
        .iter()
        .zip(&data.labels)
        .filter(|(&s, &l)| l == Label::Id && s >= threshold)
        .count();
    Ok((fp as f64 / n_id as f64, threshold))
}

/// Average precision with tied scores treated as one group sharing the
/// group-level precision.
pub fn average_precision(data: &LabeledScores) -> Result<f64> {
    let (_, n_ood) = data.validate()?;
    let sorted = data.descending();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut acc = 0.0;
    for (pos, neg) in tie_groups(&sorted) {
        tp += pos;
        fp += neg;
        if pos > 0 {
            acc += pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(acc / n_ood as f64)
}

pub fn evaluate(data: &LabeledScores) -> Result<EvalResult> {
    Ok(EvalResult {
        auroc: auroc(data)?,
        fpr95: fpr_at_95_tpr(data)?.0,
        ap: average_precision(data)?,
    })
}

/// Per-image min-max scaling to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(map: &ScoreMap) -> ScoreMap {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let data = if range > 0.0 {
        map.data.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; map.data.len()]
    };
    ScoreMap {
        height: map.height,
        width: map.width,
        data,
    }
}

/// Fused score: product of the min-max normalized auxiliary and memory maps.
pub fn cosme_score(auxcon: &ScoreMap, mulmem_std: &ScoreMap) -> Result<ScoreMap> {
    if !auxcon.same_shape(mulmem_std) {
        return Err(Error::contract(format!(
            "fusion inputs differ in shape: {}x{} vs {}x{}",
            auxcon.height, auxcon.width, mulmem_std.height, mulmem_std.width
        )));
    }
    min_max_normalize(auxcon).product(&min_max_normalize(mulmem_std))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Group {
    NormalId,
    HardId,
    Ood,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::NormalId, Group::HardId, Group::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Group::NormalId => "normal-id",
            Group::HardId => "hard-id",
            Group::Ood => "ood",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat {
    pub group: Group,
    pub count: usize,
    /// Mean of each channel over the group; `None` for an empty group.
    pub means: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub channels: Vec<String>,
    pub groups: Vec<GroupStat>,
}

impl GroupReport {
    pub fn group(&self, g: Group) -> &GroupStat {
        self.groups.iter().find(|s| s.group == g).expect("all groups present")
    }

    pub fn mean(&self, g: Group, channel: &str) -> Option<f64> {
        let c = self.channels.iter().position(|n| n == channel)?;
        self.group(g).means[c]
    }
}

/// A named per-pixel score channel aligned with a [`LabeledScores`].
pub struct Channel<'a> {
    pub name: &'a str,
    pub scores: &'a [f64],
}

/// Group means of each channel over a given pixel partition.
pub fn group_report(partition: &[Group], channels: &[Channel<'_>]) -> Result<GroupReport> {
    for c in channels {
        if c.scores.len() != partition.len() {
            return Err(Error::contract(format!(
                "channel {} has {} scores for {} pixels",
                c.name,
                c.scores.len(),
                partition.len()
            )));
        }
    }
    let groups = Group::ALL
        .iter()
        .map(|&g| {
            let idx: Vec<usize> = (0..partition.len()).filter(|&i| partition[i] == g).collect();
            let means = channels
                .iter()
                .map(|c| {
                    let vals: Vec<f64> = idx.iter().map(|&i| c.scores[i]).collect();
                    mean_std(&vals).ok().map(|(m, _)| m)
                })
                .collect();
            GroupStat {
                group: g,
                count: idx.len(),
                means,
            }
        })
        .collect();
    Ok(GroupReport {
        channels: channels.iter().map(|c| c.name.to_string()).collect(),
        groups,
    })
}

/// Ground-truth partition from the labels and the ID subtypes. ID entries
/// without subtype information count as normal.
pub fn truth_partition(data: &LabeledScores) -> Vec<Group> {
    data.labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Label::Ood => Group::Ood,
            Label::Id => match data.id_subtype.as_ref().map(|s| s[i]) {
                Some(IdSubtype::Hard) => Group::HardId,
                _ => Group::NormalId,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardIdReport {
    pub threshold: f64,
    pub report: GroupReport,
}

/// Splits ID pixels at the 95%-TPR threshold of the memory score: ID pixels
/// scoring at or above it are hard, the rest normal.
pub fn split_hard_id(mulmem: &LabeledScores, channels: &[Channel<'_>]) -> Result<HardIdReport> {
    let (_, threshold) = fpr_at_95_tpr(mulmem)?;
    let partition = threshold_partition(mulmem, threshold);
    Ok(HardIdReport {
        threshold,
        report: group_report(&partition, channels)?,
    })
}

pub fn threshold_partition(mulmem: &LabeledScores, threshold: f64) -> Vec<Group> {
    mulmem
        .scores
        .iter()
        .zip(&mulmem.labels)
        .map(|(&s, &l)| match l {
            Label::Ood => Group::Ood,
            Label::Id if s >= threshold => Group::HardId,
            Label::Id => Group::NormalId,
        })
        .collect()
}
