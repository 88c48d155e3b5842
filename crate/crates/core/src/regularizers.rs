//! Adaptive one-hot loss: entropy, tangent-activated normalized variance,
//! budget and ℓ1 importance penalties, plus the checks behind the one-hot
//! equivalences used to justify them.

use crate::bimask::ScoreVars;
use crate::space::SearchSpace;
use crate::tensor::{self, Graph, Var};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

/// Clamp margin for the normalized variance before `tan`.
pub const OMEGA_EPS: f64 = 1e-3;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    pub eta: f64,
    /// Huber width of the budget penalty; 0 gives plain `|g - τ|`.
    pub budget_huber: f64,
    /// Dead zone around τ inside which the budget penalty is 0.
    pub budget_slack: f64,
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            mu1: 0.5,
            mu2: 100.0,
            mu3: 2e-5,
            eta: 0.2,
            budget_huber: 0.05,
            budget_slack: 0.03,
        }
    }
}

impl RegularizerWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu3", self.mu3), ("eta", self.eta), ("budget_huber", self.budget_huber), ("budget_slack", self.budget_slack)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("reg.{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Shape(format!("probabilities sum to {sum}, not 1")));
    }
    if let Some(x) = p.iter().find(|&&x| x < -SIMPLEX_TOL) {
        return Err(Error::Shape(format!("negative probability {x}")));
    }
    Ok(())
}

/// `-Σ p log p` with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// `σ(p) = Σ (p_k - 1/D)² / D`.
pub fn variance(p: &[f64]) -> f64 {
    let d = p.len() as f64;
    p.iter().map(|&x| (x - 1.0 / d).powi(2)).sum::<f64>() / d
}

/// Variance of a one-hot vector of length `d`: `(d - 1) / d²`.
pub fn target_variance(d: usize) -> f64 {
    let d = d as f64;
    (d - 1.0) / (d * d)
}

/// `Ψ(p) = tan(π/2 - π ω)` with `ω = clamp(σ/σᵗ)`. The flag is `true` for a
/// single candidate, which contributes 0.
pub fn variance_term(p: &[f64]) -> Result<(f64, bool)> {
    check_simplex(p)?;
    if p.len() == 1 {
        return Ok((0.0, true));
    }
    let omega = (variance(p) / target_variance(p.len())).clamp(OMEGA_EPS, 1.0 - OMEGA_EPS);
    Ok((psi_of_omega(omega), false))
}

pub fn psi_of_omega(omega: f64) -> f64 {
    (FRAC_PI_2 - PI * omega).tan()
}

/// `|((D-1)/D² - σ) - (1 - Σp²)/D|`
pub fn variance_identity_residual(p: &[f64]) -> f64 {
    let d = p.len() as f64;
    let sq: f64 = p.iter().map(|x| x * x).sum();
    ((target_variance(p.len()) - variance(p)) - (1.0 - sq) / d).abs()
}

pub fn importance_penalty(scores: &[Vec<f64>]) -> f64 {
    scores.iter().flatten().sum()
}

/// `r = max(|g - τ| - slack, 0)`, Huber-smoothed below `delta` when
/// `delta > 0`.
pub fn budget_penalty(g: f64, tau: f64, slack: f64, delta: f64) -> f64 {
    let r = ((g - tau).abs() - slack).max(0.0);
    if r < delta {
        r * r / (2.0 * delta)
    } else {
        r - delta / 2.0
    }
}

/// Per-term values of the mask loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskLossValue {
    pub entropy: f64,
    pub psi: f64,
    pub budget: f64,
    pub importance: f64,
    pub total: f64,
}

/// `μ1 Σ_i [H(p_i) + Ψ(p_i)] + μ2 |g - τ| + μ3 Σ S` at the current state.
pub fn total_mask_loss(space: &SearchSpace, weights: &RegularizerWeights, g: f64, tau: f64) -> Result<MaskLossValue> {
    let mut v = MaskLossValue::default();
    let mut scores = Vec::new();
    for s in &space.submodules {
        let p = s.probabilities();
        v.entropy += entropy(&p)?;
        v.psi += variance_term(&p)?.0;
        scores.push(s.importance_scores());
    }
    v.budget = budget_penalty(g, tau, weights.budget_slack, weights.budget_huber);
    v.importance = importance_penalty(&scores);
    v.total = weights.mu1 * (v.entropy + v.psi) + weights.mu2 * v.budget + weights.mu3 * v.importance;
    Ok(v)
}

// ----- graph versions -------------------------------------------------------

/// `H(p)` as a graph node, with the ε-floored log.
pub fn entropy_var(g: &mut Graph, p: Var) -> tensor::Result<Var> {
    let lp = g.log(p)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp)?;
    g.neg(s)
}

/// `Ψ(p)` as a graph node; `None` for a single candidate.
pub fn psi_var(g: &mut Graph, p: Var) -> tensor::Result<Option<Var>> {
    let d = g.value(p).len();
    if d == 1 {
        return Ok(None);
    }
    let centered = g.add_scalar(p, -1.0 / d as f64)?;
    let sq = g.mul(centered, centered)?;
    let sigma = g.sum(sq)?;
    let omega = g.scale(sigma, 1.0 / (d as f64 * target_variance(d)))?;
    let omega = g.clamp(omega, OMEGA_EPS, 1.0 - OMEGA_EPS)?;
    let arg = g.scale(omega, -PI)?;
    let arg = g.add_scalar(arg, FRAC_PI_2)?;
    Ok(Some(g.tan(arg)?))
}

/// Graph nodes of every mask-loss term.
#[derive(Debug, Clone, Copy)]
pub struct MaskLossVars {
    pub entropy: Var,
    pub psi: Var,
    pub budget: Var,
    pub importance: Var,
    pub total: Var,
}

impl MaskLossVars {
    pub fn values(&self, g: &Graph) -> MaskLossValue {
        MaskLossValue {
            entropy: g.item(self.entropy),
            psi: g.item(self.psi),
            budget: g.item(self.budget),
            importance: g.item(self.importance),
            total: g.item(self.total),
        }
    }
}

/// [`budget_penalty`] of the scalar node `g_frac`.
pub fn budget_var(g: &mut Graph, g_frac: Var, tau: f64, weights: &RegularizerWeights) -> tensor::Result<Var> {
    let resid = g.add_scalar(g_frac, -tau)?;
    let mut budget = g.abs(resid)?;
    if weights.budget_slack > 0.0 {
        let dead = g.clamp(budget, 0.0, weights.budget_slack)?;
        budget = g.sub(budget, dead)?;
    }
    if weights.budget_huber > 0.0 {
        let d = weights.budget_huber;
        let inner = g.clamp(budget, 0.0, d)?;
        let sq = g.mul(inner, inner)?;
        let sq = g.scale(sq, 0.5 / d)?;
        let outer = g.sub(budget, inner)?;
        budget = g.add(sq, outer)?;
    }
    Ok(budget)
}

/// Builds `L_m` from per-submodule score nodes and the cost fraction node.
pub fn mask_loss_vars(
    g: &mut Graph,
    scores: &[ScoreVars],
    g_frac: Var,
    weights: &RegularizerWeights,
    tau: f64,
) -> tensor::Result<MaskLossVars> {
    let mut ent = g.scalar(0.0);
    let mut psi = g.scalar(0.0);
    let mut imp = g.scalar(0.0);
    for sv in scores {
        let h = entropy_var(g, sv.p)?;
        ent = g.add(ent, h)?;
        if let Some(t) = psi_var(g, sv.p)? {
            psi = g.add(psi, t)?;
        }
        let s = g.sum(sv.s)?;
        imp = g.add(imp, s)?;
    }
    let budget = budget_var(g, g_frac, tau, weights)?;
    let r = g.add(ent, psi)?;
    let a = g.scale(r, weights.mu1)?;
    let b = g.scale(budget, weights.mu2)?;
    let c = g.scale(imp, weights.mu3)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(MaskLossVars {
        entropy: ent,
        psi,
        budget,
        importance: imp,
        total,
    })
}

// ----- one-hot equivalence checks -----------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub dim: usize,
    pub kind: String,
    pub p: Vec<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub samples_per_dim: usize,
    pub dims: Vec<usize>,
    pub vectors_checked: usize,
    pub max_identity_residual: f64,
    pub violations: Vec<Violation>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_vector(p: &[f64], report: &mut TheoremReport) {
    let d = p.len();
    let h = entropy(p).unwrap_or(f64::NAN);
    let sigma = variance(p);
    let st = target_variance(d);
    let maxp = p.iter().cloned().fold(f64::MIN, f64::max);
    let props = [h < 1e-6, maxp > 1.0 - 1e-4, (sigma - st).abs() < 1e-8];
    let mut push = |kind: &str, detail: String| {
        report.violations.push(Violation {
            dim: d,
            kind: kind.into(),
            p: p.to_vec(),
            detail,
        })
    };
    if !(props.iter().all(|&b| b) || props.iter().all(|&b| !b)) {
        push("equivalence", format!("H={h:e} max={maxp} |σ-σt|={:e}", (sigma - st).abs()));
    }
    let tol = 1e-12;
    if !(h >= -tol && h <= (d as f64).ln() + tol) {
        push("entropy-bounds", format!("H={h}"));
    }
    if !(sigma >= -tol && sigma <= st + tol) {
        push("variance-bounds", format!("σ={sigma} σt={st}"));
    }
    let r = variance_identity_residual(p);
    report.max_identity_residual = report.max_identity_residual.max(r);
    if r >= 1e-12 {
        push("identity", format!("residual {r:e}"));
    }
    report.vectors_checked += 1;
}

/// Checks the three one-hot characterizations, the entropy and variance
/// bounds and the variance identity on `n_samples` Dirichlet(1) draws per
/// dimension in `dims`, plus every one-hot and uniform vector of dimension
/// 2 up to the larger of 8 and the largest entry of `dims`.
pub fn theorem_suite(n_samples: usize, dims: &[usize], seed: u64) -> Result<TheoremReport> {
    if n_samples < 1000 {
        return Err(Error::Config(format!("theorem suite needs at least 1000 samples, got {n_samples}")));
    }
    let mut report = TheoremReport {
        samples_per_dim: n_samples,
        dims: dims.to_vec(),
        vectors_checked: 0,
        max_identity_residual: 0.0,
        violations: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    for &d in dims {
        if d < 2 {
            return Err(Error::Config(format!("dimension {d} below 2")));
        }
        for _ in 0..n_samples {
            let mut p: Vec<f64> = (0..d).map(|_| gamma.sample(&mut rng)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            check_vector(&p, &mut report);
        }
    }
    let top = dims.iter().copied().max().unwrap_or(0).max(8);
    for d in 2..=top {
        for k in 0..d {
            let mut p = vec![0.0; d];
            p[k] = 1.0;
            check_vector(&p, &mut report);
        }
        check_vector(&vec![1.0 / d as f64; d], &mut report);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 0.693147).abs() < 1e-6);
        assert!(entropy(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn psi_examples() {
        let oracle = (PI / 2.0 - 0.999 * PI).tan();
        let (hot, _) = variance_term(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((hot - oracle).abs() < 1e-9 && (hot + 318.3).abs() < 0.1, "{hot}");
        let (uni, _) = variance_term(&[0.25; 4]).unwrap();
        assert!((uni + oracle).abs() < 1e-9);
        assert_eq!(psi_of_omega(0.5), (0f64).tan());
        assert_eq!(variance_term(&[1.0]).unwrap(), (0.0, true));
    }

    #[test]
    fn identity_examples() {
        assert_eq!(variance_identity_residual(&[1.0, 0.0, 0.0, 0.0]), 0.0);
        assert!(variance_identity_residual(&[0.25; 4]) < 1e-15);
        assert!((target_variance(4) - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn penalties() {
        assert_eq!(importance_penalty(&[vec![0.5; 10]]), 5.0);
        assert_eq!(importance_penalty(&[]), 0.0);
        assert_eq!(budget_penalty(0.4, 0.4, 0.0, 0.0), 0.0);
        assert!((budget_penalty(0.3, 0.2, 0.0, 0.0) - 0.1).abs() < 1e-15);
        assert!((budget_penalty(0.41, 0.4, 0.0, 0.02) - 0.0025).abs() < 1e-15);
        assert!((budget_penalty(0.1, 0.2, 0.0, 0.02) - 0.09).abs() < 1e-15);
        assert_eq!(budget_penalty(0.43, 0.4, 0.03, 0.02), 0.0);
        assert!((budget_penalty(0.14, 0.2, 0.03, 0.02) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn psi_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let w = OMEGA_EPS + (1.0 - 2.0 * OMEGA_EPS) * (i as f64 + 0.5) / 100.0;
            let v = psi_of_omega(w);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn graph_terms_match_direct() {
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let mut g = Graph::new();
        let pv = g.constant(crate::tensor::Tensor::vector(p.clone()));
        let h = entropy_var(&mut g, pv).unwrap();
        let s = psi_var(&mut g, pv).unwrap().unwrap();
        assert!((g.item(h) - entropy(&p).unwrap()).abs() < 1e-10);
        assert!((g.item(s) - variance_term(&p).unwrap().0).abs() < 1e-10);
    }

    #[test]
    fn suite_small_run() {
        let r = theorem_suite(1000, &[4, 8], 1).unwrap();
        assert!(r.passed(), "{:?}", r.violations.first());
        assert!(theorem_suite(10, &[4], 1).is_err());
    }
}
