//! Implementations of the `ofb` subcommands. Each returns the process exit
//! status: 0 success, 1 invalid input, 2 budget miss, 3 divergence.

use crate::bimask::{score_vars, score_vars_from};
use crate::config::RunConfig;
use crate::cost::{calibrate, CostCoefficients, CostReport};
use crate::data::{generate, patchify, Dataset};
use crate::pmim::sample_batch_mask;
use crate::regularizers::{budget_var, entropy_var, mask_loss_vars, psi_var, theorem_suite, RegularizerWeights, TheoremReport};
use crate::space::{ArchitectureExport, SearchSpace};
use crate::tensor::{gradient_check, Graph, Primitive, Tensor, Var};
use crate::trainer::{
    baseline_threshold_prune, evaluate, pretrain, retrain, search, LogRecord, Metrics, RetrainMetrics, SearchLog,
    SearchOutcome, SearchStatus,
};
use crate::vit::{SiteMasks, ToyViTConfig, VisionTransformer};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_BUDGET_MISS: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Exit status for an error.
pub fn status_of(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INVALID,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

// ----- shared pipeline ------------------------------------------------------

/// Data splits, calibrated cost model and the pretrained full model of a run.
pub struct Prepared {
    pub train: Dataset,
    pub eval: Dataset,
    pub coeffs: CostCoefficients,
    pub pretrained: VisionTransformer,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, eval) = generate(&cfg.dataset_spec())?;
    let coeffs = calibrate(&cfg.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
    let mut model = VisionTransformer::new(cfg.model.clone(), &mut rng)?;
    pretrain(&cfg.trainer, &mut model, &train)?;
    Ok(Prepared {
        train,
        eval,
        coeffs,
        pretrained: model,
    })
}

/// Search space with seeded random logits.
pub fn initial_space(cfg: &RunConfig) -> Result<SearchSpace> {
    let mut space = SearchSpace::build(&cfg.model, &cfg.space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed.wrapping_add(1));
    space.init_random(&mut rng, cfg.trainer.init_std);
    Ok(space)
}

pub fn run_search(cfg: &RunConfig, prep: &Prepared) -> Result<SearchOutcome> {
    search(
        &cfg.trainer,
        prep.pretrained.clone(),
        initial_space(cfg)?,
        &prep.coeffs,
        &prep.train,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub status: SearchStatus,
    pub tau: f64,
    pub final_g: f64,
    pub finished_at: Option<usize>,
    /// Materialized model on the eval split, before retraining.
    pub search_end: Metrics,
    pub cost: CostReport,
}

// ----- search / retrain / eval / baseline -----------------------------------

pub fn cmd_search(cfg: &RunConfig) -> Result<i32> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.snapshot())?;
    let prep = prepare(cfg)?;
    prep.pretrained.save(&out.join("pretrained"))?;
    let res = run_search(cfg, &prep)?;
    std::fs::write(out.join("search_log.jsonl"), res.log.to_jsonl())?;
    let mut events = String::new();
    for e in res.log.events() {
        events.push_str(&serde_json::to_string(&e)?);
        events.push('\n');
    }
    std::fs::write(out.join("prune_events.jsonl"), events)?;
    std::fs::write(out.join("architecture.json"), res.export.to_json())?;
    res.model.save(&out.join("supernet"))?;
    let pruned = res.model.materialize(&res.export)?;
    let metrics = SearchMetrics {
        status: res.status,
        tau: cfg.trainer.tau,
        final_g: res.final_g,
        finished_at: res.finished_at,
        search_end: evaluate(&pruned, &prep.eval, 256)?,
        cost: prep.coeffs.report(&pruned.arch),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "search: status {:?}, g {:.4} (tau {}), flops fraction {:.4}, accuracy {:.4}",
        metrics.status, metrics.final_g, cfg.trainer.tau, metrics.cost.flops_fraction, metrics.search_end.accuracy
    );
    Ok(match res.status {
        SearchStatus::Success => EXIT_OK,
        SearchStatus::BudgetMiss => EXIT_BUDGET_MISS,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainReport {
    pub metrics: RetrainMetrics,
    pub cost: CostReport,
}

pub fn cmd_retrain(cfg: &RunConfig) -> Result<i32> {
    let out = &cfg.output_dir;
    let supernet = VisionTransformer::load(&out.join("supernet"))?;
    let export = ArchitectureExport::from_json(&std::fs::read_to_string(out.join("architecture.json"))?)?;
    let (train, eval) = generate(&cfg.dataset_spec())?;
    let coeffs = calibrate(&cfg.model)?;
    let mut model = supernet.materialize(&export)?;
    let metrics = retrain(&cfg.trainer, &mut model, &train, &eval)?;
    model.save(&out.join("retrained"))?;
    let report = RetrainReport {
        metrics,
        cost: coeffs.report(&model.arch),
    };
    write_json(&out.join("retrain_metrics.json"), &report)?;
    println!(
        "retrain: accuracy {:.4} -> {:.4}",
        metrics.before.accuracy, metrics.after.accuracy
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub cost: CostReport,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<i32> {
    let out = &cfg.output_dir;
    let stem = match checkpoint {
        Some(p) => p.to_path_buf(),
        None if out.join("retrained.json").exists() => out.join("retrained"),
        None => out.join("supernet"),
    };
    let model = VisionTransformer::load(&stem)?;
    if model.config != cfg.model {
        return Err(Error::Shape("checkpoint model config differs from the run config".into()));
    }
    let (_, eval) = generate(&cfg.dataset_spec())?;
    let coeffs = calibrate(&cfg.model)?;
    let report = EvalReport {
        metrics: evaluate(&model, &eval, 256)?,
        cost: coeffs.report(&model.arch),
    };
    std::fs::create_dir_all(out)?;
    write_json(&out.join("eval_metrics.json"), &report)?;
    println!(
        "eval {}: accuracy {:.4}, loss {:.4}, flops fraction {:.4}",
        stem.display(),
        report.metrics.accuracy,
        report.metrics.loss,
        report.cost.flops_fraction
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineReport {
    pub threshold: f64,
    pub flops_fraction: f64,
    pub warning: Option<String>,
    pub metrics: RetrainMetrics,
    pub cost: CostReport,
}

/// Two-stage baseline followed by the same retraining as the search path.
pub fn run_baseline(cfg: &RunConfig, prep: &Prepared) -> Result<(ArchitectureExport, BaselineReport)> {
    let out = baseline_threshold_prune(&cfg.trainer, &prep.pretrained, initial_space(cfg)?, &prep.coeffs, &prep.train)?;
    if let Some(w) = &out.result.warning {
        eprintln!("warning: {w}");
    }
    let mut model = out.model.materialize(&out.result.export)?;
    let metrics = retrain(&cfg.trainer, &mut model, &prep.train, &prep.eval)?;
    Ok((
        out.result.export.clone(),
        BaselineReport {
            threshold: out.result.threshold,
            flops_fraction: out.result.flops_fraction,
            warning: out.result.warning,
            metrics,
            cost: prep.coeffs.report(&model.arch),
        },
    ))
}

pub fn cmd_baseline(cfg: &RunConfig) -> Result<i32> {
    let out = cfg.output_dir.join("baseline");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.resolved"), cfg.snapshot())?;
    let prep = prepare(cfg)?;
    let (export, report) = run_baseline(cfg, &prep)?;
    std::fs::write(out.join("architecture.json"), export.to_json())?;
    write_json(&out.join("baseline_metrics.json"), &report)?;
    println!(
        "baseline: flops fraction {:.4}, accuracy {:.4} -> {:.4}",
        report.flops_fraction, report.metrics.before.accuracy, report.metrics.after.accuracy
    );
    Ok(EXIT_OK)
}

// ----- theorems -------------------------------------------------------------

pub fn cmd_theorems(samples: usize, dims: &[usize], seed: u64, out: Option<&Path>) -> Result<(TheoremReport, i32)> {
    let report = theorem_suite(samples, dims, seed)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("theorems.json"), &report)?;
    }
    let status = if report.passed() { EXIT_OK } else { EXIT_INVALID };
    Ok((report, status))
}

// ----- gradient checks ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-5;

fn det_values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

fn det_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), det_values(n, seed, lo, hi)).expect("shape")
}

/// `Σ y ⊙ c` for a fixed pseudo-random `c`, so every output coordinate
/// contributes a distinct weight.
fn project(g: &mut Graph, y: Var) -> crate::tensor::Result<Var> {
    let c = det_tensor(&g.shape(y).to_vec(), 99, -1.0, 1.0);
    let c = g.constant(c);
    let yc = g.mul(y, c)?;
    g.sum(yc)
}

struct Checker {
    corrupt: Option<Primitive>,
    report: GradcheckReport,
}

impl Checker {
    fn run<F>(&mut self, name: &str, theta: &Tensor, coords: Option<&[usize]>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> crate::tensor::Result<Var>,
    {
        let corrupt = self.corrupt;
        let err = gradient_check(
            |g, x| {
                if let Some(p) = corrupt {
                    g.corrupt_backward(p);
                }
                f(g, x)
            },
            theta,
            GRADCHECK_STEP,
            coords,
        )?;
        self.report.entries.push(GradcheckEntry {
            name: name.to_string(),
            max_rel_error: err,
            passed: err < GRADCHECK_TOL,
        });
        Ok(())
    }
}

/// What the toy objective is differentiated against.
#[derive(Debug, Clone, Copy)]
enum Target {
    Alpha(usize),
    Importance(usize),
    Weight(usize),
}

struct ToyState {
    model: VisionTransformer,
    space: SearchSpace,
    coeffs: CostCoefficients,
    patches: Vec<f64>,
    labels: Vec<usize>,
    mask: Vec<bool>,
}

fn toy_state() -> Result<ToyState> {
    let cfg = ToyViTConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = VisionTransformer::new(cfg.clone(), &mut rng)?;
    let mut space = SearchSpace::build(&cfg, &Default::default())?;
    space.init_random(&mut rng, 1.5);
    let coeffs = calibrate(&cfg)?;
    let batch = 2;
    let n = batch * cfg.tokens() * cfg.patch_dim();
    let patches = det_values(n, 5, -1.0, 1.0);
    let mask = sample_batch_mask(batch, cfg.tokens(), 0.25, &mut rng);
    Ok(ToyState {
        model,
        space,
        coeffs,
        patches,
        labels: vec![1, 3],
        mask,
    })
}

/// Task + mask + reconstruction loss of the toy state with one tensor
/// replaced by `theta`.
fn toy_objective(st: &ToyState, g: &mut Graph, theta: Var, target: Target, tau: f64) -> crate::tensor::Result<Var> {
    let lambda = 0.4;
    let mut svs = Vec::new();
    for (i, s) in st.space.submodules.iter().enumerate() {
        let a = match target {
            Target::Alpha(j) if j == i => theta,
            _ => g.constant(s.alpha.clone()),
        };
        let imp = match target {
            Target::Importance(j) if j == i => theta,
            _ => g.constant(s.importance.clone()),
        };
        svs.push(score_vars_from(g, s, a, imp, lambda)?);
    }
    let mut pv = st.model.bind(g, false);
    if let Target::Weight(j) = target {
        pv.vars[j] = theta;
    }
    let full: Vec<_> = svs.iter().map(|s| s.m_full).collect();
    let depth = st.model.arch.layers.len();
    let masks = SiteMasks::from_space(&st.space, &full, depth);
    let wrap = |e: Error| match e {
        Error::Tensor(t) => t,
        other => panic!("toy objective: {other}"),
    };
    let out = st
        .model
        .forward(g, &pv, &st.patches, 2, &masks, Some(&st.mask))
        .map_err(wrap)?;
    let ce = g.softmax_cross_entropy(out.logits, &st.labels)?;
    let rec = st.model.reconstruct_loss(g, &out, &st.patches).map_err(wrap)?.expect("masked");
    let gv = st.coeffs.g_of_v(g, &st.space, &svs).map_err(wrap)?;
    let lm = mask_loss_vars(g, &svs, gv, &Default::default(), tau)?;
    let a = g.add(ce, rec)?;
    g.add(a, lm.total)
}

/// Gradient checks of every primitive and of the search objective pieces.
/// `corrupt` breaks one backward rule in every graph (mutation testing).
pub fn gradcheck_report(corrupt: Option<Primitive>) -> Result<GradcheckReport> {
    let mut c = Checker {
        corrupt,
        report: GradcheckReport {
            step: GRADCHECK_STEP,
            tolerance: GRADCHECK_TOL,
            entries: Vec::new(),
        },
    };
    let m34 = det_tensor(&[3, 4], 1, -1.0, 1.0);
    let m42 = det_tensor(&[4, 2], 2, -1.0, 1.0);
    let v4 = det_tensor(&[4], 3, -1.0, 1.0);
    let pos34 = det_tensor(&[3, 4], 4, 0.5, 2.0);
    let b234 = det_tensor(&[2, 3, 4], 5, -1.0, 1.0);
    let b242 = det_tensor(&[2, 4, 2], 6, -1.0, 1.0);

    let k42 = m42.clone();
    c.run("matmul.lhs", &m34, None, |g, x| {
        let b = g.constant(k42.clone());
        let y = g.matmul(x, b)?;
        project(g, y)
    })?;
    let k34 = m34.clone();
    c.run("matmul.rhs", &m42, None, |g, x| {
        let a = g.constant(k34.clone());
        let y = g.matmul(a, x)?;
        project(g, y)
    })?;
    let kb = b242.clone();
    c.run("bmm.lhs", &b234, None, |g, x| {
        let b = g.constant(kb.clone());
        let y = g.bmm(x, b)?;
        project(g, y)
    })?;
    let ka = b234.clone();
    c.run("bmm.rhs", &b242, None, |g, x| {
        let a = g.constant(ka.clone());
        let y = g.bmm(a, x)?;
        project(g, y)
    })?;

    type Bin = fn(&mut Graph, Var, Var) -> crate::tensor::Result<Var>;
    let bins: [(&str, Bin); 4] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul), ("div", Graph::div)];
    for (name, op) in bins {
        let rhs = if name == "div" { det_tensor(&[4], 7, 0.5, 2.0) } else { v4.clone() };
        let (r1, r2) = (rhs.clone(), m34.clone());
        c.run(&format!("{name}.lhs"), &m34, None, move |g, x| {
            let b = g.constant(r1.clone());
            let y = op(g, x, b)?;
            project(g, y)
        })?;
        c.run(&format!("{name}.rhs_broadcast"), &rhs, None, move |g, x| {
            let a = g.constant(r2.clone());
            let y = op(g, a, x)?;
            project(g, y)
        })?;
    }

    type Un = Box<dyn Fn(&mut Graph, Var) -> crate::tensor::Result<Var>>;
    let unary: Vec<(&str, Tensor, Un)> = vec![
        ("scale", m34.clone(), Box::new(|g, x| g.scale(x, -1.7))),
        ("add_scalar", m34.clone(), Box::new(|g, x| g.add_scalar(x, 0.3))),
        ("exp", m34.clone(), Box::new(|g, x| g.exp(x))),
        ("log", pos34.clone(), Box::new(|g, x| g.log(x))),
        ("tan", m34.clone(), Box::new(|g, x| g.tan(x))),
        ("sigmoid", m34.clone(), Box::new(|g, x| g.sigmoid(x))),
        ("gelu", m34.clone(), Box::new(|g, x| g.gelu(x))),
        ("abs", Tensor::vector(vec![-0.8, -0.3, 0.4, 1.1]), Box::new(|g, x| g.abs(x))),
        (
            "clamp",
            Tensor::vector(vec![-0.9, -0.2, 0.1, 0.35, 0.9]),
            Box::new(|g, x| g.clamp(x, -0.5, 0.5)),
        ),
        ("softmax", m34.clone(), Box::new(|g, x| g.softmax(x))),
        ("layer_norm", m34.clone(), Box::new(|g, x| g.layer_norm(x, None))),
        (
            "layer_norm.weighted_x",
            m34.clone(),
            Box::new(|g, x| {
                let w = g.constant(Tensor::vector(vec![1.0, 0.3, 0.7, 0.5]));
                g.layer_norm(x, Some(w))
            }),
        ),
        (
            "layer_norm.weights",
            Tensor::vector(vec![1.0, 0.3, 0.7, 0.5]),
            Box::new(|g, w| {
                let x = g.constant(det_tensor(&[3, 4], 1, -1.0, 1.0));
                g.layer_norm(x, Some(w))
            }),
        ),
        ("sum", m34.clone(), Box::new(|g, x| g.sum(x))),
        ("mean", m34.clone(), Box::new(|g, x| g.mean(x))),
        ("sum_axis", b234.clone(), Box::new(|g, x| g.sum_axis(x, 1))),
        ("mean_axis", b234.clone(), Box::new(|g, x| g.mean_axis(x, 1))),
        ("reshape", m34.clone(), Box::new(|g, x| g.reshape(x, &[2, 6]))),
        ("permute", b234.clone(), Box::new(|g, x| g.permute(x, &[2, 0, 1]))),
        ("transpose", b234.clone(), Box::new(|g, x| g.transpose(x))),
        ("index_select", m34.clone(), Box::new(|g, x| g.index_select(x, &[2, 0, 2]))),
        ("scatter", m34.clone(), Box::new(|g, x| g.scatter(x, &[4, 1, 2], 6))),
    ];
    for (name, theta, f) in unary {
        c.run(name, &theta, None, move |g, x| {
            let y = f(g, x)?;
            project(g, y)
        })?;
    }
    c.run("softmax_cross_entropy", &m34, None, |g, x| g.softmax_cross_entropy(x, &[1, 0, 3]))?;
    let target: Vec<f64> = m34.data().iter().map(|v| v + 0.25).collect();
    c.run("l1_loss", &m34, None, move |g, x| g.l1_loss(x, &target))?;

    // Regularizer and cost pieces on architecture logits.
    let alpha = Tensor::vector(vec![0.0, 0.7, 1.4, 2.1]);
    c.run("entropy", &alpha, None, |g, a| {
        let p = g.softmax(a)?;
        entropy_var(g, p)
    })?;
    c.run("psi", &alpha, None, |g, a| {
        let p = g.softmax(a)?;
        Ok(psi_var(g, p)?.expect("D > 1"))
    })?;

    let w = RegularizerWeights::default();
    for (name, at) in [("budget.linear", 0.2), ("budget.huber", 0.255), ("budget.slack", 0.31)] {
        let x = Tensor::vector(vec![at]).with_grad();
        c.run(name, &x, None, |g, v| {
            let s = g.sum(v)?;
            budget_var(g, s, 0.3, &w)
        })?;
    }

    let st = toy_state()?;
    let mlp = 3;
    let s_mlp = st.space.submodules[mlp].clone();
    c.run("sparsity_scores", &s_mlp.alpha, None, |g, a| {
        let imp = g.constant(s_mlp.importance.clone());
        let sv = score_vars_from(g, &s_mlp, a, imp, 0.0)?;
        project(g, sv.v)
    })?;
    for (i, s) in st.space.submodules.iter().enumerate() {
        c.run(&format!("g_of_v.alpha[{i}]"), &s.alpha, None, |g, a| {
            let mut svs = Vec::new();
            for (j, t) in st.space.submodules.iter().enumerate() {
                if i == j {
                    let imp = g.constant(t.importance.clone());
                    svs.push(score_vars_from(g, t, a, imp, 0.5)?);
                } else {
                    let mut sv = score_vars(g, t, 0.5)?;
                    sv.alpha = a;
                    svs.push(sv);
                }
            }
            st.coeffs.g_of_v(g, &st.space, &svs).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        })?;
    }
    let tau = 0.3;
    for (i, s) in st.space.submodules.iter().enumerate() {
        c.run(&format!("objective.alpha[{i}]"), &s.alpha, None, |g, x| {
            toy_objective(&st, g, x, Target::Alpha(i), tau)
        })?;
    }
    for i in [0, 3] {
        let s = &st.space.submodules[i];
        let coords: Vec<usize> = (0..s.importance.len()).step_by(5).collect();
        c.run(&format!("objective.importance[{i}]"), &s.importance, Some(&coords), |g, x| {
            toy_objective(&st, g, x, Target::Importance(i), tau)
        })?;
    }
    for name in ["blocks.0.attn.qkv.weight", "blocks.1.mlp.fc1.weight", "decoder.weight", "mask_token"] {
        let j = st.model.params.idx(name);
        let t = &st.model.params.tensors[j];
        let coords: Vec<usize> = (0..t.len()).step_by((t.len() / 8).max(1)).collect();
        c.run(&format!("objective.{name}"), t, Some(&coords), |g, x| {
            toy_objective(&st, g, x, Target::Weight(j), tau)
        })?;
    }
    Ok(c.report)
}

pub fn cmd_gradcheck(out: Option<&Path>) -> Result<(GradcheckReport, i32)> {
    let report = gradcheck_report(None)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    let status = if report.passed() { EXIT_OK } else { EXIT_INVALID };
    Ok((report, status))
}

// ----- plot data ------------------------------------------------------------

/// CSV texts derived from a search log.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub trajectories: String,
    pub kept_dims: String,
    pub curves: String,
    pub warning: Option<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn plot_data(log_text: &str) -> PlotData {
    let (log, warning) = SearchLog::from_jsonl(log_text);
    let mut traj = String::from("epoch,submodule_id,site,rank,s,v,m\n");
    for e in log.epochs() {
        let max_units = e.submodules.iter().map(|s| s.full_width).max().unwrap_or(0);
        for s in &e.submodules {
            for r in 0..max_units {
                let _ = writeln!(
                    traj,
                    "{},{},{},{},{},{},{}",
                    e.epoch,
                    s.id,
                    s.site,
                    r,
                    fmt_opt(s.s_sorted.get(r).copied()),
                    fmt_opt(s.v_sorted.get(r).copied()),
                    fmt_opt(s.m_sorted.get(r).copied())
                );
            }
        }
    }

    let mut kept = String::from("submodule_id,site,kind,layer,kept_units,full_width\n");
    if let Some(f) = log.finish() {
        for (i, s) in f.kept.iter().enumerate() {
            let site = match s.layer {
                Some(l) => format!("{}[{l}]", s.kind),
                None => s.kind.to_string(),
            };
            let layer = s.layer.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(kept, "{i},{site},{},{layer},{},{}", s.kind, s.kept_units.len(), s.full_width);
        }
    } else if let Some(e) = log.epochs().last() {
        for s in &e.submodules {
            let (kind, layer) = match s.site.split_once('[') {
                Some((k, l)) => (k.to_string(), l.trim_end_matches(']').to_string()),
                None => (s.site.clone(), String::new()),
            };
            let _ = writeln!(kept, "{},{},{kind},{layer},{},{}", s.id, s.site, s.argmax_width, s.full_width);
        }
    }

    let mut curves =
        String::from("t,epoch,loss_task,loss_rec,entropy,psi,budget,importance,loss_mask,loss_total,g,lambda,gamma,finished\n");
    for r in log.records.iter() {
        if let LogRecord::Iteration(i) = r {
            let _ = writeln!(
                curves,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                i.t,
                i.epoch,
                i.loss_task,
                i.loss_rec,
                i.entropy,
                i.psi,
                i.budget,
                i.importance,
                i.loss_mask,
                i.loss_total,
                i.g,
                i.lambda,
                i.gamma,
                i.finished
            );
        }
    }
    PlotData {
        trajectories: traj,
        kept_dims: kept,
        curves,
        warning,
    }
}

pub fn cmd_plotdata(log_path: &Path, out: &Path) -> Result<i32> {
    let text = std::fs::read_to_string(log_path)?;
    let pd = plot_data(&text);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("trajectories.csv"), &pd.trajectories)?;
    std::fs::write(out.join("kept_dims.csv"), &pd.kept_dims)?;
    std::fs::write(out.join("curves.csv"), &pd.curves)?;
    if let Some(w) = &pd.warning {
        eprintln!("warning: truncated log, partial output ({w})");
    }
    Ok(EXIT_OK)
}

// ----- data -----------------------------------------------------------------

pub fn cmd_gendata(cfg: &RunConfig, out: &Path) -> Result<i32> {
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    let (train, eval) = generate(&spec)?;
    train.write(out, "train", &spec)?;
    eval.write(out, "eval", &spec)?;
    println!("gendata: {} train / {} eval images in {}", train.len(), eval.len(), out.display());
    Ok(EXIT_OK)
}

/// Patch rows of the first `n` eval images (used by the Python bindings).
pub fn sample_patches(data: &Dataset, n: usize, patch: usize) -> Vec<f64> {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    patchify(data, &idx, patch)
}
