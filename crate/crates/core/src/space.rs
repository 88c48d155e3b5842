//! Prunable submodules, their candidate width grids and live search state.
//!
//! Every submodule owns a grid of candidate widths `w_1 < ... < w_D` (in
//! units) and a logit vector `alpha` with one entry per live candidate. Units
//! are ranked by importance; a candidate width `w` keeps the `w` top-ranked
//! units. Removing a candidate deletes its logit and its grid entry; when the
//! largest candidate goes, the units beyond the new maximum (the lowest-ranked
//! ones) leave the live set.

use crate::bimask::rank_permutation;
use crate::tensor::{sigmoid, softmax_in_place, Tensor};
use crate::vit::ToyViTConfig;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubmoduleKind {
    /// Per-layer Q-K-V head-dimension channels, shared across the layer's heads.
    QkvChannels,
    MlpChannels,
    HeadCount,
    PatchEmbedChannels,
}

impl fmt::Display for SubmoduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SubmoduleKind::QkvChannels => "qkv-channels",
            SubmoduleKind::MlpChannels => "mlp-channels",
            SubmoduleKind::HeadCount => "head-count",
            SubmoduleKind::PatchEmbedChannels => "patch-embed-channels",
        };
        f.write_str(s)
    }
}

/// `(lo, hi, step)` of a channel grid, as fractions of the full width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

/// `(lo, step)` of the head-count grid; the high end is always the layer's
/// head count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountGrid {
    pub lo: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub qkv: RatioGrid,
    pub mlp: RatioGrid,
    pub heads: CountGrid,
    pub embed: RatioGrid,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            qkv: RatioGrid {
                lo: 0.25,
                hi: 1.0,
                step: 0.125,
            },
            mlp: RatioGrid {
                lo: 0.25,
                hi: 1.0,
                step: 0.125,
            },
            heads: CountGrid { lo: 1, step: 2 },
            embed: RatioGrid {
                lo: 0.5,
                hi: 1.0,
                step: 1.0 / 32.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmoduleSpec {
    pub kind: SubmoduleKind,
    /// `None` for the global patch-embedding submodule.
    pub layer_index: Option<usize>,
    pub full_width: usize,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub step_ratio: f64,
    /// Units per grid step (Δ).
    pub unit_step: usize,
    /// Candidate widths of the unpruned grid, ascending; the last is `full_width`.
    pub grid: Vec<usize>,
}

impl SubmoduleSpec {
    fn from_ratio(kind: SubmoduleKind, layer: Option<usize>, full: usize, r: RatioGrid) -> std::result::Result<Self, String> {
        let site = site_name(kind, layer);
        let as_units = |ratio: f64, what: &str| -> std::result::Result<usize, String> {
            let u = ratio * full as f64;
            if (u - u.round()).abs() > 1e-9 || u.round() < 1.0 {
                Err(format!("{site}: {what} ratio {ratio} of width {full} is not a positive whole unit count"))
            } else {
                Ok(u.round() as usize)
            }
        };
        if !(r.lo > 0.0 && r.lo <= r.hi && (r.hi - 1.0).abs() < 1e-12) {
            return Err(format!("{site}: need 0 < lo <= hi = 1, got ({}, {})", r.lo, r.hi));
        }
        let lo = as_units(r.lo, "lo")?;
        let step = as_units(r.step, "step")?;
        if (full - lo) % step != 0 {
            return Err(format!("{site}: ({full} - {lo}) is not a multiple of step {step}"));
        }
        let grid = (0..=(full - lo) / step).map(|k| lo + k * step).collect();
        Ok(Self {
            kind,
            layer_index: layer,
            full_width: full,
            ratio_lo: r.lo,
            ratio_hi: r.hi,
            step_ratio: r.step,
            unit_step: step,
            grid,
        })
    }

    fn heads(layer: usize, heads: usize, c: CountGrid) -> std::result::Result<Self, String> {
        let site = site_name(SubmoduleKind::HeadCount, Some(layer));
        if c.lo == 0 || c.step == 0 || c.lo > heads {
            return Err(format!("{site}: invalid head grid ({}, {heads}, {})", c.lo, c.step));
        }
        let mut grid: Vec<usize> = (c.lo..=heads).step_by(c.step).collect();
        if *grid.last().unwrap() != heads {
            grid.push(heads);
        }
        Ok(Self {
            kind: SubmoduleKind::HeadCount,
            layer_index: Some(layer),
            full_width: heads,
            ratio_lo: c.lo as f64 / heads as f64,
            ratio_hi: 1.0,
            step_ratio: c.step as f64 / heads as f64,
            unit_step: c.step,
            grid,
        })
    }

    /// Candidate count of the unpruned grid.
    pub fn steps(&self) -> usize {
        self.grid.len()
    }

    pub fn site(&self) -> String {
        site_name(self.kind, self.layer_index)
    }
}

fn site_name(kind: SubmoduleKind, layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("{kind}[{l}]"),
        None => kind.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmoduleState {
    pub spec: SubmoduleSpec,
    /// Live architecture logits, one per live candidate width.
    pub alpha: Tensor,
    /// Live importance logits (pre-sigmoid), aligned with `live_unit_ids`.
    pub importance: Tensor,
    /// Original indices of live units, strictly increasing.
    pub live_unit_ids: Vec<usize>,
    /// Live candidate widths, ascending.
    pub widths: Vec<usize>,
    /// Position of each live candidate in `spec.grid`.
    pub grid_positions: Vec<usize>,
}

impl SubmoduleState {
    fn new(spec: SubmoduleSpec) -> Self {
        let d = spec.steps();
        let w = spec.full_width;
        Self {
            alpha: Tensor::zeros(&[d]).with_grad(),
            importance: Tensor::zeros(&[w]).with_grad(),
            live_unit_ids: (0..w).collect(),
            widths: spec.grid.clone(),
            grid_positions: (0..d).collect(),
            spec,
        }
    }

    /// Live step count (‖α‖₀).
    pub fn d_live(&self) -> usize {
        self.widths.len()
    }

    /// Live unit count; always the largest live candidate width.
    pub fn w_live(&self) -> usize {
        self.live_unit_ids.len()
    }

    pub fn pruned(&self) -> bool {
        self.d_live() < self.spec.steps()
    }

    /// Only one candidate remains.
    pub fn decided(&self) -> bool {
        self.d_live() == 1
    }

    /// Current importance probabilities `sigmoid(logits)`.
    pub fn importance_scores(&self) -> Vec<f64> {
        self.importance.data().iter().map(|&x| sigmoid(x)).collect()
    }

    /// Current `softmax(alpha)`.
    pub fn probabilities(&self) -> Vec<f64> {
        let mut p = self.alpha.data().to_vec();
        softmax_in_place(&mut p);
        p
    }

    /// Removes the candidate steps at live positions `steps`. Returns the
    /// original ids of units that left the live set, ascending.
    pub fn prune_steps(&mut self, steps: &[usize]) -> Result<Vec<usize>> {
        if steps.is_empty() {
            return Ok(Vec::new());
        }
        self.remove_steps(steps)?;
        let new_max = *self.widths.last().unwrap();
        if new_max >= self.w_live() {
            return Ok(Vec::new());
        }
        let order = rank_permutation(&self.importance_scores());
        let drop_positions: Vec<usize> = order[new_max..].to_vec();
        let mut removed: Vec<usize> = drop_positions.iter().map(|&p| self.live_unit_ids[p]).collect();
        removed.sort_unstable();
        self.remove_units(&removed)?;
        Ok(removed)
    }

    /// Deletes candidate steps (α entries and grid widths) without touching
    /// the live units.
    pub fn remove_steps(&mut self, steps: &[usize]) -> Result<()> {
        if steps.is_empty() {
            return Ok(());
        }
        let d = self.d_live();
        let mut sorted = steps.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != steps.len() || *sorted.last().unwrap() >= d {
            return Err(Error::Prune(format!(
                "{}: steps {steps:?} are not distinct live positions of {d}",
                self.spec.site()
            )));
        }
        if sorted.len() >= d {
            return Err(Error::Prune(format!(
                "{}: removing {steps:?} would leave no candidate (minimum one step retained)",
                self.spec.site()
            )));
        }
        let keep: Vec<usize> = (0..d).filter(|k| sorted.binary_search(k).is_err()).collect();
        let alpha: Vec<f64> = keep.iter().map(|&k| self.alpha.data()[k]).collect();
        self.alpha = Tensor::vector(alpha).with_grad();
        self.widths = keep.iter().map(|&k| self.widths[k]).collect();
        self.grid_positions = keep.iter().map(|&k| self.grid_positions[k]).collect();
        Ok(())
    }

    /// Drops the given original unit ids from the live set (replay path).
    pub fn remove_units(&mut self, ids: &[usize]) -> Result<()> {
        for id in ids {
            if self.live_unit_ids.binary_search(id).is_err() || ids.iter().filter(|&x| x == id).count() > 1 {
                return Err(Error::Prune(format!("{}: unit {id} is not live", self.spec.site())));
            }
        }
        let keep: Vec<usize> = (0..self.w_live())
            .filter(|&p| !ids.contains(&self.live_unit_ids[p]))
            .collect();
        let imp: Vec<f64> = keep.iter().map(|&p| self.importance.data()[p]).collect();
        self.live_unit_ids = keep.iter().map(|&p| self.live_unit_ids[p]).collect();
        self.importance = Tensor::vector(imp).with_grad();
        Ok(())
    }

    /// Expected kept width `Σ_k p_k w_k` at the current logits.
    pub fn expected_width(&self) -> f64 {
        self.probabilities()
            .iter()
            .zip(&self.widths)
            .map(|(p, &w)| p * w as f64)
            .sum()
    }
}

/// All prunable submodules of one supernet. Index order: patch embedding,
/// then for each layer qkv channels, head count, MLP channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub submodules: Vec<SubmoduleState>,
}

impl SearchSpace {
    /// One submodule per prunable site, zero-initialized.
    pub fn build(model: &ToyViTConfig, cfg: &SpaceConfig) -> Result<Self> {
        let mut errs = Vec::new();
        let mut specs = Vec::new();
        let mut add = |r: std::result::Result<SubmoduleSpec, String>| match r {
            Ok(s) => specs.push(s),
            Err(e) => errs.push(e),
        };
        add(SubmoduleSpec::from_ratio(
            SubmoduleKind::PatchEmbedChannels,
            None,
            model.embed_dim,
            cfg.embed,
        ));
        for l in 0..model.depth {
            add(SubmoduleSpec::from_ratio(SubmoduleKind::QkvChannels, Some(l), model.head_dim, cfg.qkv));
            add(SubmoduleSpec::heads(l, model.heads, cfg.heads));
            add(SubmoduleSpec::from_ratio(SubmoduleKind::MlpChannels, Some(l), model.mlp_dim, cfg.mlp));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs.join("; ")));
        }
        Ok(Self {
            submodules: specs.into_iter().map(SubmoduleState::new).collect(),
        })
    }

    /// Draws every α and importance logit from `N(0, std²)`.
    pub fn init_random<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for s in &mut self.submodules {
            s.alpha.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            s.importance.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        }
    }

    pub fn len(&self) -> usize {
        self.submodules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submodules.is_empty()
    }

    pub fn total_live_units(&self) -> usize {
        self.submodules.iter().map(|s| s.w_live()).sum()
    }

    pub fn find(&self, kind: SubmoduleKind, layer: Option<usize>) -> Option<usize> {
        self.submodules
            .iter()
            .position(|s| s.spec.kind == kind && s.spec.layer_index == layer)
    }

    pub fn get(&self, kind: SubmoduleKind, layer: Option<usize>) -> &SubmoduleState {
        &self.submodules[self.find(kind, layer).expect("site exists")]
    }

    /// Architecture implied by the live state: the width of each submodule is
    /// its most probable live candidate, keeping the top-ranked units.
    pub fn export(&self) -> ArchitectureExport {
        let submodules = self
            .submodules
            .iter()
            .map(|s| {
                let p = s.probabilities();
                let best = argmax(&p);
                let width = s.widths[best];
                let order = rank_permutation(&s.importance_scores());
                let mut kept: Vec<usize> = order[..width].iter().map(|&i| s.live_unit_ids[i]).collect();
                kept.sort_unstable();
                ExportedSubmodule {
                    kind: s.spec.kind,
                    layer: s.spec.layer_index,
                    kept_units: kept,
                    kept_steps: s.grid_positions[best] + 1,
                    full_width: s.spec.full_width,
                }
            })
            .collect();
        ArchitectureExport { submodules }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Serialized architecture: which original units each submodule keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureExport {
    pub submodules: Vec<ExportedSubmodule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedSubmodule {
    pub kind: SubmoduleKind,
    pub layer: Option<usize>,
    pub kept_units: Vec<usize>,
    /// 1-based position of the kept width in the unpruned candidate grid.
    pub kept_steps: usize,
    pub full_width: usize,
}

impl ArchitectureExport {
    /// The unpruned architecture of `space`.
    pub fn full(space: &SearchSpace) -> Self {
        Self {
            submodules: space
                .submodules
                .iter()
                .map(|s| ExportedSubmodule {
                    kind: s.spec.kind,
                    layer: s.spec.layer_index,
                    kept_units: (0..s.spec.full_width).collect(),
                    kept_steps: s.spec.steps(),
                    full_width: s.spec.full_width,
                })
                .collect(),
        }
    }

    pub fn get(&self, kind: SubmoduleKind, layer: Option<usize>) -> Option<&ExportedSubmodule> {
        self.submodules.iter().find(|s| s.kind == kind && s.layer == layer)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SearchSpace {
        SearchSpace::build(&ToyViTConfig::default(), &SpaceConfig::default()).unwrap()
    }

    #[test]
    fn toy_grids() {
        let s = toy();
        assert_eq!(s.len(), 1 + 3 * 2);
        let qkv = &s.get(SubmoduleKind::QkvChannels, Some(0)).spec;
        assert_eq!(qkv.steps(), 7);
        assert_eq!(qkv.unit_step, 1);
        // Channels across the 4 heads: 4 per step, {8, 12, ..., 32}.
        let channels: Vec<usize> = qkv.grid.iter().map(|w| w * 4).collect();
        assert_eq!(channels, vec![8, 12, 16, 20, 24, 28, 32]);
        let heads = &s.get(SubmoduleKind::HeadCount, Some(1)).spec;
        assert_eq!(heads.grid, vec![1, 3, 4]);
        let pe = &s.get(SubmoduleKind::PatchEmbedChannels, None).spec;
        assert_eq!((pe.unit_step, pe.steps()), (1, 17));
        let mlp = &s.get(SubmoduleKind::MlpChannels, Some(0)).spec;
        assert_eq!((mlp.unit_step, mlp.steps(), mlp.grid[0]), (8, 7, 16));
    }

    #[test]
    fn non_divisible_widths_list_sites() {
        let model = ToyViTConfig {
            mlp_dim: 60,
            ..ToyViTConfig::default()
        };
        let err = SearchSpace::build(&model, &SpaceConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mlp-channels[0]") && msg.contains("mlp-channels[1]"), "{msg}");
    }

    #[test]
    fn prune_top_steps_shrinks_units() {
        let mut s = toy();
        let qkv = &mut s.submodules[1];
        assert_eq!(qkv.d_live(), 7);
        let removed = qkv.prune_steps(&[5, 6]).unwrap();
        assert_eq!(qkv.d_live(), 5);
        // 2 unit steps = 8 channels over 4 heads.
        assert_eq!(removed.len() * 4, 8);
        assert_eq!(qkv.w_live(), 6);
    }

    #[test]
    fn prune_lowest_step_keeps_units() {
        let mut s = toy();
        let mlp = &mut s.submodules[3];
        let removed = mlp.prune_steps(&[0]).unwrap();
        assert!(removed.is_empty());
        assert_eq!(mlp.d_live(), 6);
        assert_eq!(mlp.widths[0], 24);
    }

    #[test]
    fn cannot_remove_last_step() {
        let mut s = toy();
        let h = &mut s.submodules[2];
        h.prune_steps(&[0, 1]).unwrap();
        assert_eq!(h.d_live(), 1);
        assert!(h.prune_steps(&[0]).is_err());
        assert!(h.prune_steps(&[]).unwrap().is_empty());
    }

    #[test]
    fn removed_units_are_least_important() {
        let mut s = toy();
        let m = &mut s.submodules[3];
        for (i, v) in m.importance.data_mut().iter_mut().enumerate() {
            *v = -(i as f64);
        }
        let removed = m.prune_steps(&[6]).unwrap();
        assert_eq!(removed, (56..64).collect::<Vec<_>>());
        assert_eq!(m.live_unit_ids, (0..56).collect::<Vec<_>>());
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(toy(), toy());
    }
}
