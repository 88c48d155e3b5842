//! Toy Vision Transformer with mask insertion points at every prunable site,
//! a mean-pooled classification head and a per-patch linear pixel decoder.

use crate::space::{ArchitectureExport, SearchSpace, SubmoduleKind};
use crate::tensor::{self, Graph, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub classes: usize,
}

impl Default for ToyViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            head_dim: 8,
            mlp_dim: 64,
            classes: 4,
        }
    }
}

impl ToyViTConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("model.image_size", self.image_size),
            ("model.patch_size", self.patch_size),
            ("model.channels", self.channels),
            ("model.embed_dim", self.embed_dim),
            ("model.depth", self.depth),
            ("model.heads", self.heads),
            ("model.head_dim", self.head_dim),
            ("model.mlp_dim", self.mlp_dim),
            ("model.classes", self.classes),
        ];
        for (k, v) in positive {
            if v == 0 {
                errs.push(format!("{k} must be positive"));
            }
        }
        if self.patch_size > 0 && self.image_size % self.patch_size != 0 {
            errs.push(format!(
                "model.image_size {} is not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim != self.heads * self.head_dim {
            errs.push(format!(
                "model.embed_dim {} != model.heads {} * model.head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Pixels per patch, over all channels.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerArch {
    pub heads: usize,
    pub head_dim: usize,
    pub mlp: usize,
}

/// Concrete widths of a (possibly pruned) model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub embed: usize,
    pub layers: Vec<LayerArch>,
}

impl Arch {
    pub fn full(cfg: &ToyViTConfig) -> Self {
        Self {
            embed: cfg.embed_dim,
            layers: (0..cfg.depth)
                .map(|_| LayerArch {
                    heads: cfg.heads,
                    head_dim: cfg.head_dim,
                    mlp: cfg.mlp_dim,
                })
                .collect(),
        }
    }

    pub fn from_export(export: &ArchitectureExport, cfg: &ToyViTConfig) -> Result<Self> {
        let width = |kind, layer| -> Result<usize> {
            export
                .get(kind, layer)
                .map(|s| s.kept_units.len())
                .ok_or_else(|| Error::Shape(format!("export lacks site {kind}{layer:?}")))
        };
        Ok(Self {
            embed: width(SubmoduleKind::PatchEmbedChannels, None)?,
            layers: (0..cfg.depth)
                .map(|l| {
                    Ok(LayerArch {
                        heads: width(SubmoduleKind::HeadCount, Some(l))?,
                        head_dim: width(SubmoduleKind::QkvChannels, Some(l))?,
                        mlp: width(SubmoduleKind::MlpChannels, Some(l))?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_grad());
    }

    pub fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Parameters bound into one graph, aligned with [`ParamStore`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Full-length mask nodes for each site; `None` means unmasked.
#[derive(Debug, Clone, Default)]
pub struct SiteMasks {
    pub embed: Option<Var>,
    pub layers: Vec<LayerMasks>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LayerMasks {
    pub qkv: Option<Var>,
    pub heads: Option<Var>,
    pub mlp: Option<Var>,
}

impl SiteMasks {
    pub fn none(depth: usize) -> Self {
        Self {
            embed: None,
            layers: vec![LayerMasks::default(); depth],
        }
    }

    /// Places per-submodule full-length mask nodes (in search-space order).
    pub fn from_space(space: &SearchSpace, full_masks: &[Var], depth: usize) -> Self {
        let mut out = Self::none(depth);
        for (s, &m) in space.submodules.iter().zip(full_masks) {
            match (s.spec.kind, s.spec.layer_index) {
                (SubmoduleKind::PatchEmbedChannels, _) => out.embed = Some(m),
                (SubmoduleKind::QkvChannels, Some(l)) => out.layers[l].qkv = Some(m),
                (SubmoduleKind::HeadCount, Some(l)) => out.layers[l].heads = Some(m),
                (SubmoduleKind::MlpChannels, Some(l)) => out.layers[l].mlp = Some(m),
                _ => {}
            }
        }
        out
    }

    /// Constant 0/1 masks keeping exactly the units of `export`.
    pub fn hardened(g: &mut Graph, export: &ArchitectureExport, depth: usize) -> Self {
        let mut out = Self::none(depth);
        for s in &export.submodules {
            let mut v = vec![0.0; s.full_width];
            for &u in &s.kept_units {
                v[u] = 1.0;
            }
            let m = Some(g.constant(Tensor::vector(v)));
            match (s.kind, s.layer) {
                (SubmoduleKind::PatchEmbedChannels, _) => out.embed = m,
                (SubmoduleKind::QkvChannels, Some(l)) => out.layers[l].qkv = m,
                (SubmoduleKind::HeadCount, Some(l)) => out.layers[l].heads = m,
                (SubmoduleKind::MlpChannels, Some(l)) => out.layers[l].mlp = m,
                _ => {}
            }
        }
        out
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[batch, classes]`
    pub logits: Var,
    /// `[masked patches, patch_dim]`, present only when patches were masked.
    pub reconstruction: Option<Var>,
    /// Row indices (into `batch * tokens`) of the masked patches.
    pub masked_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer {
    pub config: ToyViTConfig,
    pub arch: Arch,
    pub params: ParamStore,
}

fn shape_err(site: &str, got: usize, want: usize) -> Error {
    Error::Shape(format!("mask for {site} has {got} entries, expected {want}"))
}

impl VisionTransformer {
    /// Full-width model with random weights.
    pub fn new<R: Rng>(config: ToyViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let arch = Arch::full(&config);
        let mut m = Self::with_arch(config, arch, &mut |shape: &[usize], kind: Init| match kind {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).expect("valid std");
                let len = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(rng)).collect()).expect("shape")
            }
        });
        m.params.tensors.iter_mut().for_each(|t| t.set_requires_grad(true));
        Ok(m)
    }

    fn with_arch(config: ToyViTConfig, arch: Arch, init: &mut dyn FnMut(&[usize], Init) -> Tensor) -> Self {
        let p = config.patch_dim();
        let n = config.tokens();
        let e = arch.embed;
        let c = config.classes;
        let mut ps = ParamStore::new();
        let fan = |x: usize| Init::Normal(1.0 / (x as f64).sqrt());
        ps.push("patch_embed.weight".into(), init(&[p, e], fan(p)));
        ps.push("patch_embed.bias".into(), init(&[e], Init::Zeros));
        ps.push("pos_embed".into(), init(&[n, e], Init::Normal(0.02)));
        ps.push("mask_token".into(), init(&[e], Init::Normal(0.02)));
        for (l, la) in arch.layers.iter().enumerate() {
            let hd = la.heads * la.head_dim;
            let b = format!("blocks.{l}");
            ps.push(format!("{b}.norm1.weight"), init(&[e], Init::Ones));
            ps.push(format!("{b}.norm1.bias"), init(&[e], Init::Zeros));
            ps.push(format!("{b}.attn.qkv.weight"), init(&[e, 3 * hd], fan(e)));
            ps.push(format!("{b}.attn.qkv.bias"), init(&[3 * hd], Init::Zeros));
            ps.push(format!("{b}.attn.proj.weight"), init(&[hd, e], fan(hd)));
            ps.push(format!("{b}.attn.proj.bias"), init(&[e], Init::Zeros));
            ps.push(format!("{b}.norm2.weight"), init(&[e], Init::Ones));
            ps.push(format!("{b}.norm2.bias"), init(&[e], Init::Zeros));
            ps.push(format!("{b}.mlp.fc1.weight"), init(&[e, la.mlp], fan(e)));
            ps.push(format!("{b}.mlp.fc1.bias"), init(&[la.mlp], Init::Zeros));
            ps.push(format!("{b}.mlp.fc2.weight"), init(&[la.mlp, e], fan(la.mlp)));
            ps.push(format!("{b}.mlp.fc2.bias"), init(&[e], Init::Zeros));
        }
        ps.push("norm.weight".into(), init(&[e], Init::Ones));
        ps.push("norm.bias".into(), init(&[e], Init::Zeros));
        ps.push("head.weight".into(), init(&[e, c], fan(e)));
        ps.push("head.bias".into(), init(&[c], Init::Zeros));
        ps.push("decoder.weight".into(), init(&[e, p], fan(e)));
        ps.push("decoder.bias".into(), init(&[p], Init::Zeros));
        Self {
            config,
            arch,
            params: ps,
        }
    }

    /// Whether a parameter only serves the reconstruction branch.
    pub fn is_auxiliary(name: &str) -> bool {
        name.starts_with("decoder.") || name == "mask_token"
    }

    /// Parameter count of the deployable model (no mask token, no decoder).
    pub fn param_count(&self) -> u64 {
        self.params
            .names
            .iter()
            .zip(&self.params.tensors)
            .filter(|(n, _)| !Self::is_auxiliary(n))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Inserts all parameters into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        ParamVars { vars }
    }

    fn var(&self, pv: &ParamVars, name: &str) -> Var {
        pv.vars[self.params.idx(name)]
    }

    fn check_masks(&self, g: &Graph, masks: &SiteMasks) -> Result<()> {
        if let Some(m) = masks.embed {
            let n = g.value(m).len();
            if n != self.arch.embed {
                return Err(shape_err("patch-embed-channels", n, self.arch.embed));
            }
        }
        if masks.layers.len() != self.arch.layers.len() {
            return Err(Error::Shape(format!(
                "masks cover {} layers, model has {}",
                masks.layers.len(),
                self.arch.layers.len()
            )));
        }
        for (l, (lm, la)) in masks.layers.iter().zip(&self.arch.layers).enumerate() {
            for (m, want, kind) in [
                (lm.qkv, la.head_dim, SubmoduleKind::QkvChannels),
                (lm.heads, la.heads, SubmoduleKind::HeadCount),
                (lm.mlp, la.mlp, SubmoduleKind::MlpChannels),
            ] {
                if let Some(m) = m {
                    let n = g.value(m).len();
                    if n != want {
                        return Err(shape_err(&format!("{kind}[{l}]"), n, want));
                    }
                }
            }
        }
        Ok(())
    }

    /// Forward pass over `batch` images given as patch rows
    /// (`[batch * tokens, patch_dim]`, see [`crate::data::patchify`]).
    /// `mask_positions` (length `batch * tokens`) selects patches replaced by
    /// the mask token and reconstructed by the decoder.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        patches: &[f64],
        batch: usize,
        masks: &SiteMasks,
        mask_positions: Option<&[bool]>,
    ) -> Result<ForwardVars> {
        self.check_masks(g, masks)?;
        let cfg = &self.config;
        let n = cfg.tokens();
        let p = cfg.patch_dim();
        let e = self.arch.embed;
        let rows = batch * n;
        if patches.len() != rows * p {
            return Err(Error::Shape(format!(
                "patch data has {} values, expected {batch} x {n} x {p}",
                patches.len()
            )));
        }
        let masked_rows: Vec<usize> = match mask_positions {
            Some(mp) => {
                if mp.len() != rows {
                    return Err(Error::Shape(format!("mask positions has {} entries, expected {rows}", mp.len())));
                }
                (0..rows).filter(|&r| mp[r]).collect()
            }
            None => Vec::new(),
        };

        let x = g.constant(Tensor::new(vec![rows, p], patches.to_vec())?);
        let w = self.var(pv, "patch_embed.weight");
        let mut t = g.matmul(x, w)?;
        t = g.add(t, self.var(pv, "patch_embed.bias"))?;
        if !masked_rows.is_empty() {
            let mut sel = vec![0.0; rows * e];
            for &r in &masked_rows {
                sel[r * e..(r + 1) * e].iter_mut().for_each(|v| *v = 1.0);
            }
            let keep: Vec<f64> = sel.iter().map(|v| 1.0 - v).collect();
            let sel = g.constant(Tensor::new(vec![rows, e], sel)?);
            let keep = g.constant(Tensor::new(vec![rows, e], keep)?);
            let tok = g.mul(sel, self.var(pv, "mask_token"))?;
            t = g.mul(t, keep)?;
            t = g.add(t, tok)?;
        }
        t = g.reshape(t, &[batch, n, e])?;
        t = g.add(t, self.var(pv, "pos_embed"))?;
        t = g.reshape(t, &[rows, e])?;
        let me = masks.embed;
        t = mask_mul(g, t, me)?;

        let scale = 1.0 / (cfg.head_dim as f64).sqrt();
        for (l, la) in self.arch.layers.iter().enumerate() {
            let (h, d) = (la.heads, la.head_dim);
            let hd = h * d;
            let b = format!("blocks.{l}");
            let lm = masks.layers[l];

            let a = self.norm(g, pv, t, me, &format!("{b}.norm1"))?;
            let mut qkv = g.matmul(a, self.var(pv, &format!("{b}.attn.qkv.weight")))?;
            qkv = g.add(qkv, self.var(pv, &format!("{b}.attn.qkv.bias")))?;
            if let Some(md) = lm.qkv {
                let ones = g.constant(Tensor::filled(&[3 * h, 1], 1.0));
                let row = g.reshape(md, &[1, d])?;
                let tiled = g.matmul(ones, row)?;
                let tiled = g.reshape(tiled, &[3 * hd])?;
                qkv = g.mul(qkv, tiled)?;
            }
            let r = g.reshape(qkv, &[batch, n, 3, h, d])?;
            let r = g.permute(r, &[2, 0, 3, 1, 4])?;
            let r = g.reshape(r, &[3, batch * h * n * d])?;
            let q = g.index_select(r, &[0])?;
            let k = g.index_select(r, &[1])?;
            let v = g.index_select(r, &[2])?;
            let q = g.reshape(q, &[batch * h, n, d])?;
            let k = g.reshape(k, &[batch * h, n, d])?;
            let v = g.reshape(v, &[batch * h, n, d])?;
            let kt = g.transpose(k)?;
            let s = g.bmm(q, kt)?;
            let s = g.scale(s, scale)?;
            let att = g.softmax(s)?;
            let ctx = g.bmm(att, v)?;
            let ctx = g.reshape(ctx, &[batch, h, n, d])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let mut ctx = g.reshape(ctx, &[rows, hd])?;
            if let Some(mh) = lm.heads {
                let col = g.reshape(mh, &[h, 1])?;
                let ones = g.constant(Tensor::filled(&[1, d], 1.0));
                let ex = g.matmul(col, ones)?;
                let ex = g.reshape(ex, &[hd])?;
                ctx = g.mul(ctx, ex)?;
            }
            let mut o = g.matmul(ctx, self.var(pv, &format!("{b}.attn.proj.weight")))?;
            o = g.add(o, self.var(pv, &format!("{b}.attn.proj.bias")))?;
            o = mask_mul(g, o, me)?;
            t = g.add(t, o)?;

            let a = self.norm(g, pv, t, me, &format!("{b}.norm2"))?;
            let mut u = g.matmul(a, self.var(pv, &format!("{b}.mlp.fc1.weight")))?;
            u = g.add(u, self.var(pv, &format!("{b}.mlp.fc1.bias")))?;
            u = g.gelu(u)?;
            u = mask_mul(g, u, lm.mlp)?;
            let mut o = g.matmul(u, self.var(pv, &format!("{b}.mlp.fc2.weight")))?;
            o = g.add(o, self.var(pv, &format!("{b}.mlp.fc2.bias")))?;
            o = mask_mul(g, o, me)?;
            t = g.add(t, o)?;
        }
        let z = self.norm(g, pv, t, me, "norm")?;
        let z3 = g.reshape(z, &[batch, n, e])?;
        let pooled = g.mean_axis(z3, 1)?;
        let mut logits = g.matmul(pooled, self.var(pv, "head.weight"))?;
        logits = g.add(logits, self.var(pv, "head.bias"))?;

        let reconstruction = if masked_rows.is_empty() {
            None
        } else {
            let zr = g.index_select(z, &masked_rows)?;
            let pred = g.matmul(zr, self.var(pv, "decoder.weight"))?;
            Some(g.add(pred, self.var(pv, "decoder.bias"))?)
        };
        Ok(ForwardVars {
            logits,
            reconstruction,
            masked_rows,
        })
    }

    fn norm(&self, g: &mut Graph, pv: &ParamVars, x: Var, me: Option<Var>, prefix: &str) -> tensor::Result<Var> {
        let a = g.layer_norm(x, me)?;
        let a = g.mul(a, self.var(pv, &format!("{prefix}.weight")))?;
        let a = g.add(a, self.var(pv, &format!("{prefix}.bias")))?;
        mask_mul(g, a, me)
    }

    /// Mean absolute error between the decoder output and the pixels of the
    /// masked patches; `None` when nothing was masked.
    pub fn reconstruct_loss(&self, g: &mut Graph, out: &ForwardVars, patches: &[f64]) -> Result<Option<Var>> {
        let Some(pred) = out.reconstruction else {
            return Ok(None);
        };
        let p = self.config.patch_dim();
        let mut target = Vec::with_capacity(out.masked_rows.len() * p);
        for &r in &out.masked_rows {
            target.extend_from_slice(&patches[r * p..(r + 1) * p]);
        }
        Ok(Some(g.l1_loss(pred, &target)?))
    }

    /// Dense standalone model keeping only the units listed in `export`.
    /// Must be called on a full-width model.
    pub fn materialize(&self, export: &ArchitectureExport) -> Result<Self> {
        if self.arch != Arch::full(&self.config) {
            return Err(Error::Materialize("source model is already pruned".into()));
        }
        let cfg = &self.config;
        let arch = Arch::from_export(export, cfg)?;
        let kept = |kind, layer| -> Result<Vec<usize>> {
            export
                .get(kind, layer)
                .map(|s| s.kept_units.clone())
                .ok_or_else(|| Error::Materialize(format!("export lacks {kind}{layer:?}")))
        };
        let ke = kept(SubmoduleKind::PatchEmbedChannels, None)?;
        let all = |n: usize| (0..n).collect::<Vec<_>>();
        let mut out = Self {
            config: cfg.clone(),
            arch: arch.clone(),
            params: ParamStore::new(),
        };
        let mut take = |name: &str, rows: &[usize], cols: Option<&[usize]>| -> Result<()> {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Materialize(format!("missing parameter {name}")))?;
            out.params.push(name.to_string(), slice(t, rows, cols)?);
            Ok(())
        };
        let p = cfg.patch_dim();
        take("patch_embed.weight", &all(p), Some(&ke))?;
        take("patch_embed.bias", &ke, None)?;
        take("pos_embed", &all(cfg.tokens()), Some(&ke))?;
        take("mask_token", &ke, None)?;
        for l in 0..cfg.depth {
            let kd = kept(SubmoduleKind::QkvChannels, Some(l))?;
            let kh = kept(SubmoduleKind::HeadCount, Some(l))?;
            let kf = kept(SubmoduleKind::MlpChannels, Some(l))?;
            let (h, d) = (cfg.heads, cfg.head_dim);
            let heads_cols: Vec<usize> = kh.iter().flat_map(|&hi| kd.iter().map(move |&c| hi * d + c)).collect();
            let qkv_cols: Vec<usize> = (0..3).flat_map(|part| heads_cols.iter().map(move |&c| part * h * d + c)).collect();
            let b = format!("blocks.{l}");
            take(&format!("{b}.norm1.weight"), &ke, None)?;
            take(&format!("{b}.norm1.bias"), &ke, None)?;
            take(&format!("{b}.attn.qkv.weight"), &ke, Some(&qkv_cols))?;
            take(&format!("{b}.attn.qkv.bias"), &qkv_cols, None)?;
            take(&format!("{b}.attn.proj.weight"), &heads_cols, Some(&ke))?;
            take(&format!("{b}.attn.proj.bias"), &ke, None)?;
            take(&format!("{b}.norm2.weight"), &ke, None)?;
            take(&format!("{b}.norm2.bias"), &ke, None)?;
            take(&format!("{b}.mlp.fc1.weight"), &ke, Some(&kf))?;
            take(&format!("{b}.mlp.fc1.bias"), &kf, None)?;
            take(&format!("{b}.mlp.fc2.weight"), &kf, Some(&ke))?;
            take(&format!("{b}.mlp.fc2.bias"), &ke, None)?;
        }
        take("norm.weight", &ke, None)?;
        take("norm.bias", &ke, None)?;
        take("head.weight", &ke, Some(&all(cfg.classes)))?;
        take("head.bias", &all(cfg.classes), None)?;
        take("decoder.weight", &ke, Some(&all(p)))?;
        take("decoder.bias", &all(p), None)?;
        Ok(out)
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (manifest).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            arch: self.arch.clone(),
            tensors: entries,
        };
        std::fs::write(stem.with_extension("bin"), bytes)?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let mut params = ParamStore::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past the end of the data file", e.name)));
            }
            let data = bytes[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(e.name, Tensor::new(e.shape, data)?);
        }
        let model = Self {
            config: manifest.config,
            arch: manifest.arch,
            params,
        };
        model.check_layout()?;
        Ok(model)
    }

    /// Verifies every parameter shape against `arch`.
    pub fn check_layout(&self) -> Result<()> {
        let reference = Self::with_arch(self.config.clone(), self.arch.clone(), &mut |s, _| Tensor::zeros(s));
        if reference.params.names != self.params.names {
            return Err(Error::Checkpoint("parameter names do not match the architecture".into()));
        }
        for (name, (a, b)) in self
            .params
            .names
            .iter()
            .zip(reference.params.tensors.iter().zip(&self.params.tensors))
        {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ToyViTConfig,
    arch: Arch,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data file.
    offset: usize,
}

fn mask_mul(g: &mut Graph, x: Var, m: Option<Var>) -> tensor::Result<Var> {
    match m {
        Some(m) => g.mul(x, m),
        None => Ok(x),
    }
}

/// Rows (axis 0) and optionally columns (axis 1) of a 1-D or 2-D tensor.
fn slice(t: &Tensor, rows: &[usize], cols: Option<&[usize]>) -> Result<Tensor> {
    match (t.shape(), cols) {
        ([_], None) => Ok(Tensor::vector(rows.iter().map(|&r| t.data()[r]).collect())),
        ([_, c], Some(cols)) => {
            let mut out = Vec::with_capacity(rows.len() * cols.len());
            for &r in rows {
                for &k in cols {
                    out.push(t.data()[r * c + k]);
                }
            }
            Ok(Tensor::new(vec![rows.len(), cols.len()], out)?.with_grad())
        }
        (s, _) => Err(Error::Materialize(format!("cannot slice shape {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> VisionTransformer {
        VisionTransformer::new(ToyViTConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn patches(b: usize, seed: u64) -> Vec<f64> {
        let cfg = ToyViTConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b * cfg.tokens() * cfg.patch_dim()).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn config_validation() {
        assert!(ToyViTConfig::default().validate().is_ok());
        let bad = ToyViTConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("patch_size"));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = model();
        let x = patches(2, 1);
        let run = || {
            let mut g = Graph::new();
            let pv = m.bind(&mut g, false);
            let mut mp = vec![false; 128];
            mp[3] = true;
            mp[70] = true;
            let out = m.forward(&mut g, &pv, &x, 2, &SiteMasks::none(2), Some(&mp)).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 4]);
            assert_eq!(g.shape(out.reconstruction.unwrap()), &[2, 48]);
            g.value(out.logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unit_masks_are_identity() {
        let m = model();
        let x = patches(2, 2);
        let mut g = Graph::new();
        let pv = m.bind(&mut g, false);
        let plain = m.forward(&mut g, &pv, &x, 2, &SiteMasks::none(2), None).unwrap().logits;
        let space = SearchSpace::build(&m.config, &Default::default()).unwrap();
        let export = ArchitectureExport::full(&space);
        let masks = SiteMasks::hardened(&mut g, &export, 2);
        let masked = m.forward(&mut g, &pv, &x, 2, &masks, None).unwrap().logits;
        for (a, b) in g.value(plain).iter().zip(g.value(masked)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_mask_names_site() {
        let m = model();
        let x = patches(1, 3);
        let mut g = Graph::new();
        let pv = m.bind(&mut g, false);
        let mut masks = SiteMasks::none(2);
        masks.layers[1].mlp = Some(g.constant(Tensor::filled(&[10], 1.0)));
        let err = m.forward(&mut g, &pv, &x, 1, &masks, None).unwrap_err();
        assert!(err.to_string().contains("mlp-channels[1]"), "{err}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        m.save(&stem).unwrap();
        assert_eq!(VisionTransformer::load(&stem).unwrap(), m);
    }

    #[test]
    fn decoder_isolated_from_classification() {
        let m = model();
        let x = patches(1, 4);
        let mut g = Graph::new();
        let pv = m.bind(&mut g, true);
        let mut mp = vec![false; 64];
        mp[0] = true;
        let out = m.forward(&mut g, &pv, &x, 1, &SiteMasks::none(2), Some(&mp)).unwrap();
        let ce = g.softmax_cross_entropy(out.logits, &[1]).unwrap();
        g.backward(ce).unwrap();
        let dec = pv.vars[m.params.idx("decoder.weight")];
        assert!(g.grad(dec).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
        assert!(g.grad(pv.vars[m.params.idx("mask_token")]).is_some());
    }
}
