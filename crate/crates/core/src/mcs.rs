//! Masked calibration simulation.
//!
//! Every calibration sequence is replayed once per timestep of a uniform
//! grid. A fixed prefix stays visible; every other position survives with
//! the probability given by the visibility schedule and is otherwise
//! replaced by the mask token.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{write_tensor, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `alpha(t) = 1 - t / T`.
    Linear,
    /// Same visibility at every timestep; used for ablations and limits.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct McsConfig {
    pub timesteps: usize,
    pub gamma: f64,
    pub schedule: Schedule,
    pub mask_id: u32,
    pub seed: u64,
}

impl Default for McsConfig {
    fn default() -> Self {
        Self {
            timesteps: 8,
            gamma: 0.25,
            schedule: Schedule::Linear,
            mask_id: 63,
            seed: 0,
        }
    }
}

impl McsConfig {
    pub fn validate(&self, vocab: u32) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if let Schedule::Fixed(a) = self.schedule {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("fixed visibility {a} outside [0, 1]")));
            }
        }
        if self.mask_id >= vocab {
            return Err(Error::Config(format!(
                "mask id {} outside vocabulary of {vocab}",
                self.mask_id
            )));
        }
        Ok(())
    }

    /// Visibility at `t_index` under this config's schedule.
    pub fn alpha(&self, t_index: usize) -> Result<f64> {
        let linear = visibility_schedule(t_index, self.timesteps)?;
        Ok(match self.schedule {
            Schedule::Linear => linear,
            Schedule::Fixed(a) => a,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    pub visible: Vec<bool>,
    /// One-based timestep in `1..=T`.
    pub t_index: usize,
    pub alpha: f64,
}

impl MaskedSequence {
    /// Sequence with every position visible.
    pub fn unmasked(ids: Vec<u32>) -> Self {
        let visible = vec![true; ids.len()];
        Self {
            ids,
            visible,
            t_index: 0,
            alpha: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Linear visibility `1 - t/T` for a one-based timestep.
pub fn visibility_schedule(t_index: usize, timesteps: usize) -> Result<f64> {
    if timesteps == 0 || t_index == 0 || t_index > timesteps {
        return Err(Error::invalid(format!(
            "timestep {t_index} outside 1..={timesteps}"
        )));
    }
    Ok(1.0 - t_index as f64 / timesteps as f64)
}

/// Zero-based positions of the always-visible prefix, `0..floor(gamma * len)`.
pub fn build_prefix_set(len: usize, gamma: f64) -> Range<usize> {
    let n = (gamma * len as f64).floor() as usize;
    0..n.min(len)
}

pub fn sample_mask(x: &[u32], t_index: usize, cfg: &McsConfig, rng: &mut Rng) -> Result<MaskedSequence> {
    if x.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if let Some(pos) = x.iter().position(|&id| id == cfg.mask_id) {
        return Err(Error::invalid(format!(
            "source token at position {pos} equals the mask id {}",
            cfg.mask_id
        )));
    }
    let alpha = cfg.alpha(t_index)?;
    let prefix = build_prefix_set(x.len(), cfg.gamma);
    let mut ids = Vec::with_capacity(x.len());
    let mut visible = Vec::with_capacity(x.len());
    for (i, &tok) in x.iter().enumerate() {
        let keep = prefix.contains(&i) || rng.bernoulli(alpha);
        visible.push(keep);
        ids.push(if keep { tok } else { cfg.mask_id });
    }
    Ok(MaskedSequence {
        ids,
        visible,
        t_index,
        alpha,
    })
}

/// Random stream used for sequence `seq` at one-based timestep `t_index`.
fn stream_id(seq: usize, t_index: usize, timesteps: usize) -> u64 {
    (seq * timesteps + (t_index - 1)) as u64
}

/// Builds the masked calibration set: `|X| * T` sequences, ordered by source
/// sequence then timestep.
pub fn simulate<S: AsRef<[u32]> + Sync>(sequences: &[S], cfg: &McsConfig) -> Result<Vec<MaskedSequence>> {
    if sequences.is_empty() {
        return Err(Error::invalid("no calibration sequences"));
    }
    let t = cfg.timesteps;
    if t == 0 {
        return Err(Error::Config("timesteps must be at least 1".into()));
    }
    (0..sequences.len() * t)
        .into_par_iter()
        .map(|flat| {
            let seq = flat / t;
            let t_index = flat % t + 1;
            let mut rng = Rng::new(cfg.seed, stream_id(seq, t_index, t));
            sample_mask(sequences[seq].as_ref(), t_index, cfg, &mut rng)
        })
        .collect()
}

/// Writes the masked ids and a 0/1 visibility tensor, both `(count, L)` u32.
pub fn write_calibration_set(
    ids_path: impl AsRef<Path>,
    visible_path: impl AsRef<Path>,
    set: &[MaskedSequence],
) -> Result<()> {
    let len = set.first().map_or(0, MaskedSequence::len);
    if set.iter().any(|s| s.len() != len) {
        return Err(Error::shape("masked sequences have unequal lengths"));
    }
    let ids = set.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let vis = set
        .iter()
        .flat_map(|s| s.visible.iter().map(|&v| v as u32))
        .collect();
    write_tensor(ids_path, &Tensor::tokens(set.len(), len, ids)?)?;
    write_tensor(visible_path, &Tensor::tokens(set.len(), len, vis)?)
}
