//! Compute cost of the toy ViT: exact multiply-accumulate and parameter
//! counts of concrete architectures, and the differentiable expected-cost
//! fraction `g` used by the budget penalty.
//!
//! With `N` tokens, `P` pixels per patch, `C` classes, embedding width `E`
//! and per-layer heads `h`, head width `d` and MLP width `f`:
//!
//! ```text
//! MACs = N·P·E + Σ_l [4·N·E·h·d + 2·N²·h·d + 2·N·E·f] + E·C
//! ```
//!
//! (patch embedding, qkv + output projection, attention scores + context,
//! MLP, head). The decoder is not part of the deployed model.

use crate::bimask::ScoreVars;
use crate::space::{ArchitectureExport, SearchSpace, SubmoduleKind};
use crate::tensor::{self, Graph, Tensor, Var};
use crate::vit::{Arch, LayerArch, SiteMasks, ToyViTConfig, VisionTransformer};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// `N·P`, multiplies `E`.
    pub patch_embed: u64,
    /// `4·N`, multiplies `E·h·d`.
    pub projections: u64,
    /// `2·N²`, multiplies `h·d`.
    pub attention: u64,
    /// `2·N`, multiplies `E·f`.
    pub mlp: u64,
    /// `C`, multiplies `E`.
    pub head: u64,
    pub tokens: u64,
    pub patch_dim: u64,
    pub classes: u64,
    pub depth: usize,
    pub full_flops: u64,
    pub full_params: u64,
    pub calibrated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub flops_fraction: f64,
    pub params_fraction: f64,
}

impl CostCoefficients {
    /// Coefficients from the closed form, not yet checked against a counter.
    pub fn closed_form(cfg: &ToyViTConfig) -> Self {
        let n = cfg.tokens() as u64;
        let p = cfg.patch_dim() as u64;
        let c = cfg.classes as u64;
        let mut k = Self {
            patch_embed: n * p,
            projections: 4 * n,
            attention: 2 * n * n,
            mlp: 2 * n,
            head: c,
            tokens: n,
            patch_dim: p,
            classes: c,
            depth: cfg.depth,
            full_flops: 0,
            full_params: 0,
            calibrated: false,
        };
        let full = Arch::full(cfg);
        k.full_flops = k.flops(&full);
        k.full_params = k.params(&full);
        k
    }

    pub fn flops(&self, arch: &Arch) -> u64 {
        let e = arch.embed as u64;
        let mut total = self.patch_embed * e + self.head * e;
        for l in &arch.layers {
            let hd = (l.heads * l.head_dim) as u64;
            total += self.projections * e * hd + self.attention * hd + self.mlp * e * l.mlp as u64;
        }
        total
    }

    pub fn params(&self, arch: &Arch) -> u64 {
        let e = arch.embed as u64;
        let (n, p, c) = (self.tokens, self.patch_dim, self.classes);
        let mut total = p * e + e + n * e + 2 * e + e * c + c;
        for l in &arch.layers {
            let hd = (l.heads * l.head_dim) as u64;
            let f = l.mlp as u64;
            total += 2 * e + 3 * e * hd + 3 * hd + hd * e + e + 2 * e + e * f + f + f * e + e;
        }
        total
    }

    pub fn report(&self, arch: &Arch) -> CostReport {
        let flops = self.flops(arch);
        let params = self.params(arch);
        CostReport {
            flops,
            params,
            flops_fraction: flops as f64 / self.full_flops as f64,
            params_fraction: params as f64 / self.full_params as f64,
        }
    }

    /// Exact counts of the architecture in `export`.
    pub fn discrete_cost(&self, export: &ArchitectureExport, cfg: &ToyViTConfig) -> Result<CostReport> {
        Ok(self.report(&Arch::from_export(export, cfg)?))
    }

    /// Expected cost fraction at the current α values.
    pub fn g_value(&self, space: &SearchSpace) -> Result<f64> {
        self.ensure_calibrated()?;
        let w = |k, l| space.get(k, l).expected_width();
        let e = w(SubmoduleKind::PatchEmbedChannels, None);
        let mut total = (self.patch_embed + self.head) as f64 * e;
        for l in 0..self.depth {
            let d = w(SubmoduleKind::QkvChannels, Some(l));
            let h = w(SubmoduleKind::HeadCount, Some(l));
            let f = w(SubmoduleKind::MlpChannels, Some(l));
            total += self.projections as f64 * e * h * d + self.attention as f64 * h * d + self.mlp as f64 * e * f;
        }
        Ok(total / self.full_flops as f64)
    }

    fn ensure_calibrated(&self) -> Result<()> {
        if self.calibrated {
            Ok(())
        } else {
            Err(Error::Cost("coefficients are not calibrated".into()))
        }
    }

    /// `g` as a graph node: the cost polynomial at the expected widths
    /// `Σ_k p_k w_k` of every submodule, over the full-model cost.
    pub fn g_of_v(&self, g: &mut Graph, space: &SearchSpace, scores: &[ScoreVars]) -> Result<Var> {
        self.ensure_calibrated()?;
        let mut widths = Vec::with_capacity(scores.len());
        for (st, sv) in space.submodules.iter().zip(scores) {
            widths.push(expected_width_var(g, sv.p, &st.widths)?);
        }
        let at = |k, l| space.find(k, l).map(|i| widths[i]).expect("site exists");
        let e = at(SubmoduleKind::PatchEmbedChannels, None);
        let mut total = g.scale(e, (self.patch_embed + self.head) as f64)?;
        for l in 0..self.depth {
            let d = at(SubmoduleKind::QkvChannels, Some(l));
            let h = at(SubmoduleKind::HeadCount, Some(l));
            let f = at(SubmoduleKind::MlpChannels, Some(l));
            let hd = g.mul(h, d)?;
            let ehd = g.mul(e, hd)?;
            let ef = g.mul(e, f)?;
            let a = g.scale(ehd, self.projections as f64)?;
            let b = g.scale(hd, self.attention as f64)?;
            let c = g.scale(ef, self.mlp as f64)?;
            total = g.add(total, a)?;
            total = g.add(total, b)?;
            total = g.add(total, c)?;
        }
        Ok(g.scale(total, 1.0 / self.full_flops as f64)?)
    }
}

/// `Σ_k p_k w_k` (equal to the sum of the unit sparsity scores).
pub fn expected_width_var(g: &mut Graph, p: Var, widths: &[usize]) -> tensor::Result<Var> {
    let w = g.constant(Tensor::vector(widths.iter().map(|&w| w as f64).collect()));
    let pw = g.mul(p, w)?;
    g.sum(pw)
}

/// Width settings used to validate the closed form.
fn probe_archs(cfg: &ToyViTConfig) -> Vec<Arch> {
    let full = Arch::full(cfg);
    let mut out = vec![full.clone()];
    let mut a = full.clone();
    a.embed = (cfg.embed_dim / 2).max(1);
    out.push(a);
    let mut a = full.clone();
    a.layers[0].heads = cfg.heads.saturating_sub(1).max(1);
    out.push(a);
    let mut a = full.clone();
    a.layers.iter_mut().for_each(|l| l.mlp = (cfg.mlp_dim / 2).max(1));
    out.push(a);
    let mut a = full.clone();
    a.layers.iter_mut().for_each(|l| l.head_dim = (cfg.head_dim / 4).max(1));
    out.push(a);
    out.push(Arch {
        embed: (cfg.embed_dim / 2).max(1),
        layers: (0..cfg.depth)
            .map(|l| LayerArch {
                heads: 1 + l % cfg.heads,
                head_dim: (cfg.head_dim / 2).max(1),
                mlp: (cfg.mlp_dim / 4).max(1),
            })
            .collect(),
    });
    out
}

/// Builds the coefficients and checks them against the forward-pass
/// multiply-accumulate counter and the materialized parameter count on
/// several width settings.
pub fn calibrate(cfg: &ToyViTConfig) -> Result<CostCoefficients> {
    cfg.validate()?;
    let mut k = CostCoefficients::closed_form(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = VisionTransformer::new(cfg.clone(), &mut rng)?;
    for arch in probe_archs(cfg) {
        let export = export_for(&arch, cfg);
        let model = full.materialize(&export)?;
        let mut g = Graph::new();
        let pv = model.bind(&mut g, false);
        let patches = vec![0.1; cfg.tokens() * cfg.patch_dim()];
        model.forward(&mut g, &pv, &patches, 1, &SiteMasks::none(cfg.depth), None)?;
        let (counted, predicted) = (g.macs(), k.flops(&arch));
        if counted != predicted {
            return Err(Error::Cost(format!(
                "flops mismatch at {arch:?}: counter {counted}, closed form {predicted}"
            )));
        }
        let (counted, predicted) = (model.param_count(), k.params(&arch));
        if counted != predicted {
            return Err(Error::Cost(format!(
                "param mismatch at {arch:?}: counted {counted}, closed form {predicted}"
            )));
        }
    }
    k.calibrated = true;
    Ok(k)
}

/// Export keeping the leading units of each site at the widths of `arch`.
pub fn export_for(arch: &Arch, cfg: &ToyViTConfig) -> ArchitectureExport {
    let mut subs = Vec::new();
    let site = |kind, layer, kept: usize, full: usize| crate::space::ExportedSubmodule {
        kind,
        layer,
        kept_units: (0..kept).collect(),
        kept_steps: 0,
        full_width: full,
    };
    subs.push(site(SubmoduleKind::PatchEmbedChannels, None, arch.embed, cfg.embed_dim));
    for (l, la) in arch.layers.iter().enumerate() {
        subs.push(site(SubmoduleKind::QkvChannels, Some(l), la.head_dim, cfg.head_dim));
        subs.push(site(SubmoduleKind::HeadCount, Some(l), la.heads, cfg.heads));
        subs.push(site(SubmoduleKind::MlpChannels, Some(l), la.mlp, cfg.mlp_dim));
    }
    ArchitectureExport { submodules: subs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bimask::score_vars;

    #[test]
    fn calibrates_on_default_toy() {
        let k = calibrate(&ToyViTConfig::default()).unwrap();
        assert!(k.calibrated);
        assert!(k.full_flops > 0);
    }

    #[test]
    fn uncalibrated_is_an_error() {
        let cfg = ToyViTConfig::default();
        let k = CostCoefficients::closed_form(&cfg);
        let space = SearchSpace::build(&cfg, &Default::default()).unwrap();
        assert!(k.g_value(&space).is_err());
    }

    #[test]
    fn full_space_costs_one() {
        let cfg = ToyViTConfig::default();
        let k = calibrate(&cfg).unwrap();
        let mut space = SearchSpace::build(&cfg, &Default::default()).unwrap();
        for s in &mut space.submodules {
            let d = s.d_live();
            s.alpha.data_mut()[d - 1] = 1e3;
        }
        assert_eq!(k.g_value(&space).unwrap(), 1.0);
        let mut g = Graph::new();
        let sv: Vec<_> = space.submodules.iter().map(|s| score_vars(&mut g, s, 1.0).unwrap()).collect();
        let gv = k.g_of_v(&mut g, &space, &sv).unwrap();
        assert_eq!(g.item(gv), 1.0);
    }

    #[test]
    fn halving_mlp_halves_mlp_term_only() {
        let cfg = ToyViTConfig::default();
        let k = calibrate(&cfg).unwrap();
        let full = Arch::full(&cfg);
        let mut half = full.clone();
        half.layers.iter_mut().for_each(|l| l.mlp /= 2);
        let n = cfg.tokens() as u64;
        let mlp_full = cfg.depth as u64 * 2 * n * cfg.embed_dim as u64 * cfg.mlp_dim as u64;
        assert_eq!(k.flops(&full) - k.flops(&half), mlp_full / 2);
    }

    #[test]
    fn expected_width_uniform() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.25; 4]));
        let w = expected_width_var(&mut g, p, &[8, 16, 24, 32]).unwrap();
        assert_eq!(g.item(w), 20.0);
    }
}
