//! Importance scores, step-wise sparsity scores and their time-blended mask.
//!
//! For a submodule with live candidate widths `w_1 < ... < w_D` and
//! `p = softmax(alpha)`, the unit at importance rank `r` (1-based) gets the
//! sparsity score `V(r) = Σ_{k : w_k >= r} p_k`, i.e. the probability that the
//! chosen width keeps it. With a uniform grid starting at `Δ` this is
//! `Σ_{k = ⌈r/Δ⌉}^{D} p_k`. The mask applied in the forward pass is
//! `m = λ S + (1 - λ) V`.

use crate::space::SubmoduleState;
use crate::tensor::{self, Graph, Tensor, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Linear decay of the importance weight: `λ(t) = 1 - t / T`, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub total_steps: usize,
}

impl LambdaSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self { total_steps }
    }

    pub fn lambda(&self, t: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        (1.0 - t as f64 / self.total_steps as f64).clamp(0.0, 1.0)
    }
}

/// Unit positions sorted by descending score; ties keep ascending position.
pub fn rank_permutation(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep index order.
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// `rank_of[position]` for a permutation produced by [`rank_permutation`].
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (r, &p) in perm.iter().enumerate() {
        inv[p] = r;
    }
    inv
}

/// Sparsity score of each rank `0..units` (0-based) for probabilities `p`
/// over candidate `widths`.
pub fn sparsity_by_rank(p: &[f64], widths: &[usize], units: usize) -> Vec<f64> {
    (0..units)
        .map(|r| {
            p.iter()
                .zip(widths)
                .filter(|(_, &w)| w > r)
                .map(|(pk, _)| pk)
                .sum()
        })
        .collect()
}

/// Sparsity scores in unit order: the rank-`r` unit of `importance` receives
/// the `r`-th largest slot.
pub fn sparsity_scores(p: &[f64], widths: &[usize], importance: &[f64]) -> Vec<f64> {
    let by_rank = sparsity_by_rank(p, widths, importance.len());
    let perm = rank_permutation(importance);
    let mut v = vec![0.0; importance.len()];
    for (r, &pos) in perm.iter().enumerate() {
        v[pos] = by_rank[r];
    }
    v
}

/// Blended mask values of one submodule with the ordering that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiMaskSnapshot {
    pub m: Vec<f64>,
    pub permutation: Vec<usize>,
}

/// `m = λ S + (1 - λ) V`, elementwise in unit order.
pub fn blend(s: &[f64], v: &[f64], lambda: f64) -> Result<BiMaskSnapshot> {
    if s.len() != v.len() {
        return Err(Error::Shape(format!(
            "blend: importance has {} units but sparsity has {}",
            s.len(),
            v.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Shape(format!("blend: lambda {lambda} outside [0, 1]")));
    }
    let m = s
        .iter()
        .zip(v)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok(BiMaskSnapshot {
        m,
        permutation: rank_permutation(s),
    })
}

/// Current snapshot of a submodule's scores (no graph).
pub fn snapshot(state: &SubmoduleState, lambda: f64) -> Result<(Vec<f64>, Vec<f64>, BiMaskSnapshot)> {
    let s = state.importance_scores();
    let v = sparsity_scores(&state.probabilities(), &state.widths, &s);
    let snap = blend(&s, &v, lambda)?;
    Ok((s, v, snap))
}

/// Graph nodes for one submodule's scores.
#[derive(Debug, Clone)]
pub struct ScoreVars {
    /// Leaf for the live α.
    pub alpha: Var,
    /// Leaf for the live importance logits.
    pub importance: Var,
    pub p: Var,
    pub s: Var,
    pub v: Var,
    /// Live-unit masks.
    pub m: Var,
    /// Masks over all original units; removed units are 0.
    pub m_full: Var,
    pub permutation: Vec<usize>,
}

/// Inserts a submodule's α and importance logits as parameters and builds
/// `S`, `V` and `m`. The rank permutation is a constant of the graph.
pub fn score_vars(g: &mut Graph, state: &SubmoduleState, lambda: f64) -> tensor::Result<ScoreVars> {
    let alpha = g.param(&state.alpha);
    let importance = g.param(&state.importance);
    score_vars_from(g, state, alpha, importance, lambda)
}

/// [`score_vars`] with caller-provided α and importance-logit nodes. The
/// rank permutation still comes from `state`.
pub fn score_vars_from(
    g: &mut Graph,
    state: &SubmoduleState,
    alpha: Var,
    importance: Var,
    lambda: f64,
) -> tensor::Result<ScoreVars> {
    let p = g.softmax(alpha)?;
    let s = g.sigmoid(importance)?;

    let units = state.w_live();
    let d = state.d_live();
    let perm = rank_permutation(&state.importance_scores());
    let rank_of = inverse_permutation(&perm);
    let mut assign = vec![0.0; units * d];
    for pos in 0..units {
        for (k, &w) in state.widths.iter().enumerate() {
            if w > rank_of[pos] {
                assign[pos * d + k] = 1.0;
            }
        }
    }
    let assign = g.constant(Tensor::new(vec![units, d], assign)?);
    let p_col = g.reshape(p, &[d, 1])?;
    let v = g.matmul(assign, p_col)?;
    let v = g.reshape(v, &[units])?;

    let s_part = g.scale(s, lambda)?;
    let v_part = g.scale(v, 1.0 - lambda)?;
    let m = g.add(s_part, v_part)?;
    let m_col = g.reshape(m, &[units, 1])?;
    let m_full = g.scatter(m_col, &state.live_unit_ids, state.spec.full_width)?;
    let m_full = g.reshape(m_full, &[state.spec.full_width])?;
    Ok(ScoreVars {
        alpha,
        importance,
        p,
        s,
        v,
        m,
        m_full,
        permutation: perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{SearchSpace, SpaceConfig};
    use crate::vit::ToyViTConfig;

    #[test]
    fn lambda_endpoints() {
        let l = LambdaSchedule::new(100);
        assert_eq!(l.lambda(0), 1.0);
        assert_eq!(l.lambda(100), 0.0);
        assert_eq!(l.lambda(250), 0.0);
        assert_eq!(l.lambda(25), 0.75);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_permutation(&[0.2, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_permutation(&[0.3; 5]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn uniform_staircase() {
        let p = [0.25; 4];
        let v = sparsity_by_rank(&p, &[8, 16, 24, 32], 32);
        for (r, &x) in v.iter().enumerate() {
            let expect = match r {
                0..=7 => 1.0,
                8..=15 => 0.75,
                16..=23 => 0.5,
                _ => 0.25,
            };
            assert_eq!(x, expect, "rank {r}");
        }
    }

    #[test]
    fn singleton_gives_ones() {
        let v = sparsity_by_rank(&[1.0], &[12], 12);
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn blend_endpoints_and_length_check() {
        let s = [0.8, 0.1];
        let v = [0.6, 0.3];
        assert_eq!(blend(&s, &v, 1.0).unwrap().m, s.to_vec());
        assert_eq!(blend(&s, &v, 0.0).unwrap().m, v.to_vec());
        assert!((blend(&[0.8], &[0.6], 0.5).unwrap().m[0] - 0.7).abs() < 1e-15);
        assert!(blend(&s, &[0.1], 0.5).is_err());
    }

    #[test]
    fn graph_scores_match_direct_values() {
        let mut space = SearchSpace::build(&ToyViTConfig::default(), &SpaceConfig::default()).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        space.init_random(&mut rng, 0.5);
        let st = &space.submodules[3];
        let mut g = Graph::new();
        let sv = score_vars(&mut g, st, 0.3).unwrap();
        let (s, v, snap) = snapshot(st, 0.3).unwrap();
        assert_eq!(g.value(sv.s), s.as_slice());
        for (a, b) in g.value(sv.v).iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in g.value(sv.m).iter().zip(&snap.m) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(sv.permutation, snap.permutation);
    }
}
