//! Training loops: supervised (pre)training, the joint search over weights,
//! importance scores and architecture logits, retraining of the pruned
//! model, evaluation, and the two-stage threshold baseline.

use crate::bimask::{rank_permutation, score_vars, snapshot, LambdaSchedule};
use crate::cost::CostCoefficients;
use crate::data::{patchify, Dataset};
use crate::optim::Adam;
use crate::pmim::{sample_batch_mask, MaskingMode, MaskingSchedule};
use crate::pruner::{finalize, finish_check, maybe_prune, PruneEvent, PruneSchedule};
use crate::regularizers::{mask_loss_vars, MaskLossValue, RegularizerWeights};
use crate::space::{ArchitectureExport, ExportedSubmodule, SearchSpace};
use crate::tensor::{Graph, TensorError};
use crate::vit::{ParamVars, SiteMasks, VisionTransformer};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Search epochs.
    pub epochs: usize,
    /// Defaults to a fifth of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_score: f64,
    pub beta1_score: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Slack of the finish test `|g - τ| ≤ tol`, in fractions of full FLOPs.
    pub finish_tol: f64,
    pub reg: RegularizerWeights,
    pub masking: MaskingMode,
    pub gamma_start: f64,
    pub gamma_end: f64,
    /// Keep the reconstruction loss (γ frozen at its end value) after the
    /// search finishes.
    pub rec_after_finish: bool,
    /// Std of the random α / importance-logit initialization.
    pub init_std: f64,
    /// Hold α fixed during warmup; weights and importance logits still train.
    pub freeze_alpha_warmup: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 8,
            epochs: 30,
            warmup_epochs: None,
            retrain_epochs: 4,
            batch_size: 32,
            lr_main: 1e-3,
            lr_score: 0.05,
            beta1_score: 0.5,
            weight_decay: 0.05,
            tau: 0.5,
            finish_tol: 0.05,
            reg: RegularizerWeights::default(),
            masking: MaskingMode::Progressive,
            gamma_start: 0.01,
            gamma_end: 0.25,
            rec_after_finish: true,
            init_std: 0.3,
            freeze_alpha_warmup: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 5)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("trainer.epochs must be positive".to_string());
        }
        if self.warmup() >= self.epochs.max(1) {
            errs.push(format!(
                "trainer.warmup_epochs {} must be below trainer.epochs {}",
                self.warmup(),
                self.epochs
            ));
        }
        if self.batch_size == 0 {
            errs.push("trainer.batch_size must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            errs.push(format!("trainer.tau {} must lie in (0, 1)", self.tau));
        }
        for (k, v) in [
            ("trainer.lr_main", self.lr_main),
            ("trainer.lr_score", self.lr_score),
            ("trainer.weight_decay", self.weight_decay),
            ("trainer.finish_tol", self.finish_tol),
            ("trainer.init_std", self.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{k} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1_score) {
            errs.push(format!("trainer.beta1_score {} must lie in [0, 1)", self.beta1_score));
        }
        if !(0.0 <= self.gamma_start && self.gamma_start <= self.gamma_end && self.gamma_end <= 1.0) {
            errs.push(format!(
                "pmim gammas ({}, {}) must satisfy 0 <= start <= end <= 1",
                self.gamma_start, self.gamma_end
            ));
        }
        if let Err(e) = self.reg.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

// ----- search log -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub epoch: usize,
    pub loss_task: f64,
    pub loss_rec: f64,
    pub entropy: f64,
    pub psi: f64,
    pub budget: f64,
    pub importance: f64,
    pub loss_mask: f64,
    pub loss_total: f64,
    pub g: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmoduleSnapshot {
    pub id: usize,
    pub site: String,
    pub d_live: usize,
    pub w_live: usize,
    pub full_width: usize,
    pub p: Vec<f64>,
    /// Width of the most probable live candidate.
    pub argmax_width: usize,
    /// Scores in descending-importance order.
    pub s_sorted: Vec<f64>,
    pub v_sorted: Vec<f64>,
    pub m_sorted: Vec<f64>,
    /// Adjacent equal importance scores in the ranking.
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub t: usize,
    pub lambda: f64,
    pub submodules: Vec<SubmoduleSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishRecord {
    pub t: usize,
    pub g: f64,
    pub kept: Vec<ExportedSubmodule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LogRecord {
    Iteration(IterationRecord),
    Prune(PruneEvent),
    Epoch(EpochRecord),
    Finish(FinishRecord),
}

/// Append-only record of one search.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchLog {
    pub records: Vec<LogRecord>,
}

impl SearchLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("serializable"));
            s.push('\n');
        }
        s
    }

    /// Parses line-JSON; stops at the first unreadable line and returns the
    /// records before it with a description of the problem.
    pub fn from_jsonl(text: &str) -> (Self, Option<String>) {
        let mut log = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => log.push(r),
                Err(e) => return (log, Some(format!("line {}: {e}", i + 1))),
            }
        }
        (log, None)
    }

    pub fn events(&self) -> Vec<PruneEvent> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Prune(e) => Some(e.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iteration(it) => Some(it),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn finish(&self) -> Option<&FinishRecord> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Finish(f) => Some(f),
            _ => None,
        })
    }
}

// ----- shared helpers -------------------------------------------------------

fn divergence(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op, node }) => Error::Divergence {
            iteration: t,
            reason: format!("{op:?} produced a non-finite value at node {node}"),
        },
        other => other,
    }
}

fn apply_weight_grads(model: &mut VisionTransformer, g: &Graph, pv: &ParamVars, opt: &mut Adam) {
    opt.begin_step();
    for (i, name) in model.params.names.iter().enumerate() {
        if let Some(grad) = g.grad(pv.vars[i]) {
            let t = &mut model.params.tensors[i];
            let rank = t.shape().len();
            opt.update(name, rank, t.data_mut(), grad);
        }
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(batch.min(n).max(1)).map(|c| c.to_vec()).collect()
}

/// Plain supervised training of every weight. Returns the mean loss of each
/// epoch.
pub fn train_supervised(
    model: &mut VisionTransformer,
    data: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(lr, 0.9, weight_decay);
    let mut losses = Vec::with_capacity(epochs);
    let masks = SiteMasks::none(model.arch.layers.len());
    let mut t = 0;
    for _ in 0..epochs {
        let mut sum = 0.0;
        let bs = batches(data.len(), batch, rng);
        for idx in &bs {
            let patches = patchify(data, idx, model.config.patch_size);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let pv = model.bind(&mut g, true);
            let step = |g: &mut Graph| -> Result<f64> {
                let out = model.forward(g, &pv, &patches, idx.len(), &masks, None)?;
                let ce = g.softmax_cross_entropy(out.logits, &labels)?;
                g.backward(ce)?;
                Ok(g.item(ce))
            };
            let loss = step(&mut g).map_err(divergence(t))?;
            apply_weight_grads(model, &g, &pv, &mut opt);
            sum += loss;
            t += 1;
        }
        losses.push(sum / bs.len().max(1) as f64);
    }
    Ok(losses)
}

/// Top-1 accuracy and mean cross-entropy over all of `data`, in order.
pub fn evaluate(model: &VisionTransformer, data: &Dataset, batch: usize) -> Result<Metrics> {
    evaluate_masked(model, data, batch, None)
}

/// Evaluation with constant 0/1 masks keeping the units of `export`.
pub fn evaluate_masked(
    model: &VisionTransformer,
    data: &Dataset,
    batch: usize,
    export: Option<&ArchitectureExport>,
) -> Result<Metrics> {
    if data.channels != model.config.channels || data.image_size != model.config.image_size {
        return Err(Error::Shape(format!(
            "data is {}x{}x{}, model expects {}x{}x{}",
            data.channels,
            data.image_size,
            data.image_size,
            model.config.channels,
            model.config.image_size,
            model.config.image_size
        )));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx_all: Vec<usize> = (0..data.len()).collect();
    for idx in idx_all.chunks(batch.max(1)) {
        let patches = patchify(data, idx, model.config.patch_size);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut g = Graph::new();
        let pv = model.bind(&mut g, false);
        let masks = match export {
            Some(e) => SiteMasks::hardened(&mut g, e, model.arch.layers.len()),
            None => SiteMasks::none(model.arch.layers.len()),
        };
        let out = model.forward(&mut g, &pv, &patches, idx.len(), &masks, None)?;
        let ce = g.softmax_cross_entropy(out.logits, &labels)?;
        loss += g.item(ce) * idx.len() as f64;
        let c = model.config.classes;
        for (row, &y) in g.value(out.logits).chunks(c).zip(&labels) {
            if crate::space::argmax(row) == y {
                correct += 1;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Metrics {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

// ----- search ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStatus {
    Success,
    BudgetMiss,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub log: SearchLog,
    pub export: ArchitectureExport,
    /// Supernet weights at the end of the search.
    pub model: VisionTransformer,
    pub space: SearchSpace,
    pub status: SearchStatus,
    /// Expected cost fraction at the end.
    pub final_g: f64,
    pub finished_at: Option<usize>,
}

fn epoch_record(space: &SearchSpace, epoch: usize, t: usize, lambda: f64) -> Result<EpochRecord> {
    let mut subs = Vec::with_capacity(space.len());
    for (id, s) in space.submodules.iter().enumerate() {
        let (sc, v, snap) = snapshot(s, lambda)?;
        let perm = &snap.permutation;
        let s_sorted: Vec<f64> = perm.iter().map(|&i| sc[i]).collect();
        let ties = s_sorted.windows(2).filter(|w| w[0] == w[1]).count();
        let p = s.probabilities();
        subs.push(SubmoduleSnapshot {
            id,
            site: s.spec.site(),
            d_live: s.d_live(),
            w_live: s.w_live(),
            full_width: s.spec.full_width,
            argmax_width: s.widths[crate::space::argmax(&p)],
            p,
            v_sorted: perm.iter().map(|&i| v[i]).collect(),
            m_sorted: perm.iter().map(|&i| snap.m[i]).collect(),
            s_sorted,
            ties,
        });
    }
    Ok(EpochRecord {
        epoch,
        t,
        lambda,
        submodules: subs,
    })
}

/// Keep-lists for the optimizer state of a submodule after `ev`.
fn retained_positions(ev: &PruneEvent, live_before: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let steps = (0..ev.p_before.len()).filter(|k| !ev.removed_steps.contains(k)).collect();
    let units = (0..live_before.len())
        .filter(|&i| !ev.removed_unit_ids.contains(&live_before[i]))
        .collect();
    (steps, units)
}

/// Joint search over weights, importance logits and architecture logits,
/// starting from `model` (normally pretrained).
pub fn search(
    cfg: &TrainConfig,
    mut model: VisionTransformer,
    mut space: SearchSpace,
    coeffs: &CostCoefficients,
    data: &Dataset,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let bsz = cfg.batch_size.min(data.len());
    let iters = data.len() / bsz.max(1);
    let total = cfg.epochs * iters;
    let warmup = cfg.warmup() * iters;
    let lam = LambdaSchedule::new(total);
    let masking = MaskingSchedule {
        gamma_start: cfg.gamma_start,
        gamma_end: cfg.gamma_end,
        total_steps: total,
        mode: cfg.masking,
    };
    let mut prune = PruneSchedule::new(iters, cfg.reg.eta, warmup);
    let mut opt_w = Adam::new(cfg.lr_main, 0.9, cfg.weight_decay);
    let mut opt_s = Adam::new(cfg.lr_score, cfg.beta1_score, 0.0);
    let depth = model.arch.layers.len();
    let n_tok = model.config.tokens();
    let mut log = SearchLog::default();
    let mut finished_at = None;
    let mut t = 0usize;
    let mut last_g = coeffs.g_value(&space)?;

    for epoch in 0..cfg.epochs {
        for idx in batches(data.len(), bsz, &mut rng) {
            let finished = finished_at.is_some();
            let lambda = if finished { 0.0 } else { lam.lambda(t) };
            let gamma = match (finished, cfg.rec_after_finish) {
                (true, false) => 0.0,
                (true, true) => masking.gamma(total),
                _ => masking.gamma(t),
            };
            let patches = patchify(data, &idx, model.config.patch_size);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mp = sample_batch_mask(idx.len(), n_tok, gamma, &mut mask_rng);

            let mut g = Graph::new();
            let pv = model.bind(&mut g, true);
            let step = |g: &mut Graph| -> Result<(Vec<crate::bimask::ScoreVars>, IterationRecord)> {
                let mut svs = Vec::with_capacity(space.len());
                for s in &space.submodules {
                    svs.push(score_vars(g, s, lambda)?);
                }
                let full: Vec<_> = svs.iter().map(|s| s.m_full).collect();
                let masks = SiteMasks::from_space(&space, &full, depth);
                let out = model.forward(g, &pv, &patches, idx.len(), &masks, Some(&mp))?;
                let ce = g.softmax_cross_entropy(out.logits, &labels)?;
                let rec = model.reconstruct_loss(g, &out, &patches)?;
                let gv = coeffs.g_of_v(g, &space, &svs)?;
                let mut total_loss = ce;
                if let Some(r) = rec {
                    total_loss = g.add(total_loss, r)?;
                }
                let mut mask_vals = MaskLossValue::default();
                if !finished {
                    let lm = mask_loss_vars(g, &svs, gv, &cfg.reg, cfg.tau)?;
                    total_loss = g.add(total_loss, lm.total)?;
                    mask_vals = lm.values(g);
                }
                g.backward(total_loss)?;
                let rec_v = rec.map(|r| g.item(r)).unwrap_or(0.0);
                Ok((
                    svs,
                    IterationRecord {
                        t,
                        epoch,
                        loss_task: g.item(ce),
                        loss_rec: rec_v,
                        entropy: mask_vals.entropy,
                        psi: mask_vals.psi,
                        budget: mask_vals.budget,
                        importance: mask_vals.importance,
                        loss_mask: mask_vals.total,
                        loss_total: g.item(total_loss),
                        g: g.item(gv),
                        lambda,
                        gamma,
                        finished,
                    },
                ))
            };
            let (svs, rec) = step(&mut g).map_err(divergence(t))?;
            apply_weight_grads(&mut model, &g, &pv, &mut opt_w);
            if !finished {
                opt_s.begin_step();
                for (i, (s, sv)) in space.submodules.iter_mut().zip(&svs).enumerate() {
                    let frozen = cfg.freeze_alpha_warmup && t < warmup;
                    if let Some(grad) = g.grad(sv.alpha).filter(|_| !frozen) {
                        opt_s.update(&format!("alpha.{i}"), 1, s.alpha.data_mut(), grad);
                    }
                    if let Some(grad) = g.grad(sv.importance) {
                        opt_s.update(&format!("importance.{i}"), 1, s.importance.data_mut(), grad);
                    }
                }
            }
            log.push(LogRecord::Iteration(rec));
            t += 1;

            if finished_at.is_none() {
                let live_before: Vec<Vec<usize>> = space.submodules.iter().map(|s| s.live_unit_ids.clone()).collect();
                let mut events = maybe_prune(&mut space, &prune, t)?;
                last_g = coeffs.g_value(&space)?;
                if t >= warmup && finish_check(&space, last_g, cfg.tau, cfg.finish_tol) {
                    events.extend(finalize(&mut space, t)?);
                    prune.finished = true;
                    finished_at = Some(t);
                    last_g = coeffs.g_value(&space)?;
                }
                for ev in events {
                    let (steps, units) = retained_positions(&ev, &live_before[ev.submodule_id]);
                    opt_s.retain(&format!("alpha.{}", ev.submodule_id), &steps);
                    opt_s.retain(&format!("importance.{}", ev.submodule_id), &units);
                    log.push(LogRecord::Prune(ev));
                }
                if finished_at.is_some() {
                    log.push(LogRecord::Finish(FinishRecord {
                        t,
                        g: last_g,
                        kept: space.export().submodules,
                    }));
                }
            }
        }
        let lambda = if finished_at.is_some() { 0.0 } else { lam.lambda(t) };
        log.push(LogRecord::Epoch(epoch_record(&space, epoch, t, lambda)?));
    }

    Ok(SearchOutcome {
        export: space.export(),
        status: if finished_at.is_some() {
            SearchStatus::Success
        } else {
            SearchStatus::BudgetMiss
        },
        final_g: last_g,
        finished_at,
        log,
        model,
        space,
    })
}

// ----- retrain --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub before: Metrics,
    pub after: Metrics,
    pub epoch_losses_last: Option<f64>,
}

/// Supervised fine-tuning of a materialized model (no masks, no mask loss,
/// no patch masking).
pub fn retrain(
    cfg: &TrainConfig,
    model: &mut VisionTransformer,
    train: &Dataset,
    eval: &Dataset,
) -> Result<RetrainMetrics> {
    let before = evaluate(model, eval, 256)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xe7a1));
    let losses = train_supervised(
        model,
        train,
        cfg.retrain_epochs,
        cfg.batch_size,
        cfg.lr_main,
        cfg.weight_decay,
        &mut rng,
    )?;
    let after = if cfg.retrain_epochs == 0 {
        before
    } else {
        evaluate(model, eval, 256)?
    };
    Ok(RetrainMetrics {
        before,
        after,
        epoch_losses_last: losses.last().copied(),
    })
}

/// Pretraining from random weights.
pub fn pretrain(cfg: &TrainConfig, model: &mut VisionTransformer, train: &Dataset) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e7));
    train_supervised(
        model,
        train,
        cfg.pretrain_epochs,
        cfg.batch_size,
        cfg.lr_main,
        cfg.weight_decay,
        &mut rng,
    )
}

// ----- two-stage baseline ---------------------------------------------------

/// Stage 1: learn importance logits jointly with the weights under
/// `m = S` and the ℓ1 penalty only.
pub fn train_importance(
    cfg: &TrainConfig,
    model: &mut VisionTransformer,
    space: &mut SearchSpace,
    data: &Dataset,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_w = Adam::new(cfg.lr_main, 0.9, cfg.weight_decay);
    let mut opt_s = Adam::new(cfg.lr_score, cfg.beta1_score, 0.0);
    let depth = model.arch.layers.len();
    let bsz = cfg.batch_size.min(data.len());
    let mut t = 0;
    for _ in 0..cfg.epochs {
        for idx in batches(data.len(), bsz, &mut rng) {
            let patches = patchify(data, &idx, model.config.patch_size);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let pv = model.bind(&mut g, true);
            let step = |g: &mut Graph| -> Result<Vec<crate::bimask::ScoreVars>> {
                let mut svs = Vec::with_capacity(space.len());
                for s in &space.submodules {
                    svs.push(score_vars(g, s, 1.0)?);
                }
                let full: Vec<_> = svs.iter().map(|s| s.m_full).collect();
                let masks = SiteMasks::from_space(space, &full, depth);
                let out = model.forward(g, &pv, &patches, idx.len(), &masks, None)?;
                let mut loss = g.softmax_cross_entropy(out.logits, &labels)?;
                let mut l1 = g.scalar(0.0);
                for sv in &svs {
                    let s = g.sum(sv.s)?;
                    l1 = g.add(l1, s)?;
                }
                let l1 = g.scale(l1, cfg.reg.mu3)?;
                loss = g.add(loss, l1)?;
                g.backward(loss)?;
                Ok(svs)
            };
            let svs = step(&mut g).map_err(divergence(t))?;
            apply_weight_grads(model, &g, &pv, &mut opt_w);
            opt_s.begin_step();
            for (i, (s, sv)) in space.submodules.iter_mut().zip(&svs).enumerate() {
                if let Some(grad) = g.grad(sv.importance) {
                    opt_s.update(&format!("importance.{i}"), 1, s.importance.data_mut(), grad);
                }
            }
            t += 1;
        }
    }
    Ok(())
}

/// Export keeping, per submodule, the smallest grid width that covers every
/// unit whose importance is at least `theta`.
pub fn threshold_export(space: &SearchSpace, theta: f64) -> ArchitectureExport {
    let submodules = space
        .submodules
        .iter()
        .map(|s| {
            let sc = s.importance_scores();
            let above = sc.iter().filter(|&&v| v >= theta).count();
            let pos = s.spec.grid.iter().position(|&w| w >= above).unwrap_or(s.spec.steps() - 1);
            let width = s.spec.grid[pos];
            let order = rank_permutation(&sc);
            let mut kept: Vec<usize> = order[..width].iter().map(|&i| s.live_unit_ids[i]).collect();
            kept.sort_unstable();
            ExportedSubmodule {
                kind: s.spec.kind,
                layer: s.spec.layer_index,
                kept_units: kept,
                kept_steps: pos + 1,
                full_width: s.spec.full_width,
            }
        })
        .collect();
    ArchitectureExport { submodules }
}

/// Result of the stage-2 threshold search.
#[derive(Debug, Clone)]
pub struct ThresholdResult {
    pub export: ArchitectureExport,
    pub threshold: f64,
    pub flops_fraction: f64,
    pub warning: Option<String>,
}

/// Stage 2: binary search over a single global importance threshold for the
/// lowest one whose discrete cost fits in `tau`.
pub fn threshold_search(
    space: &SearchSpace,
    coeffs: &CostCoefficients,
    model_cfg: &crate::vit::ToyViTConfig,
    tau: f64,
) -> Result<ThresholdResult> {
    let cost = |e: &ArchitectureExport| -> Result<f64> { Ok(coeffs.discrete_cost(e, model_cfg)?.flops_fraction) };
    let mut values: Vec<f64> = space.submodules.iter().flat_map(|s| s.importance_scores()).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    values.dedup();
    // Cost is non-increasing in the threshold; find the first feasible index.
    let (mut lo, mut hi) = (0usize, values.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if cost(&threshold_export(space, values[mid]))? <= tau {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (threshold, warning) = if lo < values.len() {
        (values[lo], None)
    } else {
        (
            f64::INFINITY,
            Some(format!("budget {tau} unreachable within the grid; exporting the minimal architecture")),
        )
    };
    let export = threshold_export(space, threshold);
    let flops_fraction = cost(&export)?;
    Ok(ThresholdResult {
        export,
        threshold,
        flops_fraction,
        warning,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub result: ThresholdResult,
    /// Weights after the importance-learning stage.
    pub model: VisionTransformer,
    pub space: SearchSpace,
}

/// Two-stage baseline from a (pretrained) model: importance learning, then
/// global threshold pruning to `tau`.
pub fn baseline_threshold_prune(
    cfg: &TrainConfig,
    model: &VisionTransformer,
    mut space: SearchSpace,
    coeffs: &CostCoefficients,
    data: &Dataset,
) -> Result<BaselineOutcome> {
    let mut model = model.clone();
    train_importance(cfg, &mut model, &mut space, data)?;
    let result = threshold_search(&space, coeffs, &model.config, cfg.tau)?;
    Ok(BaselineOutcome { result, model, space })
}
