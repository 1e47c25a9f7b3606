//! Blockwise mixed precision: column groups are ranked by importance and the
//! top and bottom `k` groups trade one bit each, keeping the per-layer mean
//! at exactly two.

use std::cmp::Ordering;
use std::ops::Range;

use crate::error::{Error, Result};

/// Orders assigned to groups outside the top/bottom `k`.
pub const BASE_ORDER: u8 = 2;

/// Contiguous input-column groups of an `rows x cols` layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    rows: usize,
    cols: usize,
    group_width: usize,
    groups: Vec<Range<usize>>,
}

impl GroupPartition {
    pub fn from_ranges(
        rows: usize,
        cols: usize,
        group_width: usize,
        groups: Vec<Range<usize>>,
    ) -> Result<Self> {
        let p = Self {
            rows,
            cols,
            group_width,
            groups,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks that the groups are ordered, disjoint and cover `0..cols`.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for g in &self.groups {
            if g.start != next {
                return Err(Error::invalid(format!(
                    "group {g:?} leaves a gap or overlap at column {next}"
                )));
            }
            if g.is_empty() {
                return Err(Error::invalid(format!("empty group at column {next}")));
            }
            next = g.end;
        }
        if next != self.cols {
            return Err(Error::invalid(format!(
                "groups cover 0..{next}, layer has {} columns",
                self.cols
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn group_width(&self) -> usize {
        self.group_width
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn is_full_width(&self, g: usize) -> bool {
        self.groups[g].len() == self.group_width
    }
}

pub fn partition(rows: usize, cols: usize, group_width: usize) -> Result<GroupPartition> {
    if rows == 0 || cols == 0 || group_width == 0 {
        return Err(Error::invalid(format!(
            "cannot partition {rows}x{cols} into groups of {group_width}"
        )));
    }
    let groups = (0..cols)
        .step_by(group_width)
        .map(|start| start..(start + group_width).min(cols))
        .collect();
    Ok(GroupPartition {
        rows,
        cols,
        group_width,
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitAllocation {
    pub bits: Vec<u8>,
    pub k: usize,
}

impl BitAllocation {
    pub fn uniform(groups: usize, order: u8) -> Self {
        Self {
            bits: vec![order; groups],
            k: 0,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.total_bits() as f64 / self.bits.len() as f64
    }

    /// Counts of groups at orders 1, 2 and 3.
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for &b in &self.bits {
            if (1..=3).contains(&b) {
                h[b as usize - 1] += 1;
            }
        }
        h
    }
}

/// `floor(ratio * groups)`, tolerant of the representation error in `ratio`.
pub fn reallocation_count(groups: usize, ratio: f64) -> usize {
    (ratio * groups as f64 + 1e-9).floor() as usize
}

fn check_inputs(scores: &[f64], ratio: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&ratio) {
        return Err(Error::invalid(format!("reallocation ratio {ratio} outside [0, 0.5]")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid(format!("score {i} is {}", scores[i])));
    }
    Ok(())
}

/// Group indices by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top-`k` groups get order 3, bottom-`k` order 1, the rest order 2.
pub fn allocate(scores: &[f64], ratio: f64) -> Result<BitAllocation> {
    check_inputs(scores, ratio)?;
    let k = reallocation_count(scores.len(), ratio);
    let order = ranking(scores);
    let mut bits = vec![BASE_ORDER; scores.len()];
    for &g in &order[..k] {
        bits[g] = 3;
    }
    for &g in &order[order.len() - k..] {
        bits[g] = 1;
    }
    Ok(BitAllocation { bits, k })
}

/// Like [`allocate`], but a ragged tail group always keeps order 2; the next
/// full-width group in rank order takes its slot.
pub fn allocate_groups(
    partition: &GroupPartition,
    scores: &[f64],
    ratio: f64,
) -> Result<BitAllocation> {
    if scores.len() != partition.len() {
        return Err(Error::shape(format!(
            "{} scores for {} groups",
            scores.len(),
            partition.len()
        )));
    }
    check_inputs(scores, ratio)?;
    let eligible: Vec<usize> = ranking(scores)
        .into_iter()
        .filter(|&g| partition.is_full_width(g))
        .collect();
    let k = reallocation_count(scores.len(), ratio).min(eligible.len() / 2);
    let mut bits = vec![BASE_ORDER; scores.len()];
    for &g in &eligible[..k] {
        bits[g] = 3;
    }
    for &g in &eligible[eligible.len() - k..] {
        bits[g] = 1;
    }
    Ok(BitAllocation { bits, k })
}
