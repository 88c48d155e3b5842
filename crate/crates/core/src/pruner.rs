//! Triggered pruning: every `interval` iterations, candidate steps whose
//! probability falls to `η / D_live` or below are deleted.

use crate::space::{argmax, SearchSpace};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest probability mass allowed off the top candidate for a submodule
/// to count as one-hot.
pub const ONE_HOT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub interval: usize,
    pub eta: f64,
    /// No pruning before this iteration.
    pub warmup: usize,
    pub finished: bool,
}

impl PruneSchedule {
    /// Interval of a third of an epoch, rounded up.
    pub fn new(iters_per_epoch: usize, eta: f64, warmup: usize) -> Self {
        Self {
            interval: iters_per_epoch.div_ceil(3).max(1),
            eta,
            warmup,
            finished: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// Probability fell below the trigger threshold.
    Trigger,
    /// Non-chosen candidates dropped once the search finished.
    Finalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub submodule_id: usize,
    pub site: String,
    pub kind: EventKind,
    /// Live positions (before the event) of the removed candidates.
    pub removed_steps: Vec<usize>,
    pub removed_unit_ids: Vec<usize>,
    pub p_before: Vec<f64>,
    pub p_min: f64,
    pub threshold: f64,
}

fn apply(space: &mut SearchSpace, id: usize, steps: Vec<usize>, t: usize, kind: EventKind, threshold: f64) -> Result<PruneEvent> {
    let s = &mut space.submodules[id];
    let p = s.probabilities();
    let p_min = steps.iter().map(|&k| p[k]).fold(f64::INFINITY, f64::min);
    let removed = s.prune_steps(&steps)?;
    let sum: f64 = s.probabilities().iter().sum();
    debug_assert!((sum - 1.0).abs() < 1e-12);
    Ok(PruneEvent {
        step: t,
        submodule_id: id,
        site: s.spec.site(),
        kind,
        removed_steps: steps,
        removed_unit_ids: removed,
        p_before: p,
        p_min,
        threshold,
    })
}

/// Removes, in every undecided submodule, each step with `p_k ≤ η / D_live`.
/// The most probable step always survives.
pub fn prune_below_threshold(space: &mut SearchSpace, eta: f64, t: usize) -> Result<Vec<PruneEvent>> {
    let mut events = Vec::new();
    for id in 0..space.len() {
        let s = &space.submodules[id];
        let d = s.d_live();
        if d < 2 {
            continue;
        }
        let p = s.probabilities();
        let threshold = eta / d as f64;
        let top = argmax(&p);
        let steps: Vec<usize> = (0..d).filter(|&k| k != top && p[k] <= threshold).collect();
        if !steps.is_empty() {
            events.push(apply(space, id, steps, t, EventKind::Trigger, threshold)?);
        }
    }
    Ok(events)
}

/// Trigger check at interval boundaries after warmup; no-op once finished.
pub fn maybe_prune(space: &mut SearchSpace, schedule: &PruneSchedule, t: usize) -> Result<Vec<PruneEvent>> {
    if schedule.finished || t < schedule.warmup || t % schedule.interval != 0 {
        return Ok(Vec::new());
    }
    prune_below_threshold(space, schedule.eta, t)
}

/// `|g - τ| ≤ tol` (fractions of full FLOPs) and every submodule decided or
/// one-hot.
pub fn finish_check(space: &SearchSpace, g_fraction: f64, tau: f64, tol: f64) -> bool {
    (g_fraction - tau).abs() <= tol
        && space.submodules.iter().all(|s| {
            s.decided() || s.probabilities().iter().cloned().fold(0.0, f64::max) >= 1.0 - ONE_HOT_TOL
        })
}

/// Drops every non-argmax step so that each submodule is decided.
pub fn finalize(space: &mut SearchSpace, t: usize) -> Result<Vec<PruneEvent>> {
    let mut events = Vec::new();
    for id in 0..space.len() {
        let s = &space.submodules[id];
        if s.decided() {
            continue;
        }
        let top = argmax(&s.probabilities());
        let steps: Vec<usize> = (0..s.d_live()).filter(|&k| k != top).collect();
        events.push(apply(space, id, steps, t, EventKind::Finalize, ONE_HOT_TOL)?);
    }
    Ok(events)
}

/// Applies a logged event stream to `space` (normally the initial space).
pub fn replay(space: &mut SearchSpace, events: &[PruneEvent]) -> Result<()> {
    for ev in events {
        let s = space
            .submodules
            .get_mut(ev.submodule_id)
            .ok_or_else(|| Error::Prune(format!("event names unknown submodule {}", ev.submodule_id)))?;
        s.remove_steps(&ev.removed_steps)?;
        s.remove_units(&ev.removed_unit_ids)?;
        if s.widths.last() != Some(&s.w_live()) {
            return Err(Error::Prune(format!(
                "{}: replay left {} live units for max width {:?}",
                s.spec.site(),
                s.w_live(),
                s.widths.last()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::SpaceConfig;
    use crate::vit::ToyViTConfig;

    fn space() -> SearchSpace {
        SearchSpace::build(&ToyViTConfig::default(), &SpaceConfig::default()).unwrap()
    }

    fn set_p(space: &mut SearchSpace, id: usize, p: &[f64]) {
        let s = &mut space.submodules[id];
        s.remove_steps(&(p.len()..s.d_live()).collect::<Vec<_>>()).unwrap();
        let live = *s.widths.last().unwrap();
        let drop: Vec<usize> = s.live_unit_ids[live..].to_vec();
        s.remove_units(&drop).unwrap();
        s.alpha.data_mut().iter_mut().zip(p).for_each(|(a, &x)| *a = x.ln());
    }

    #[test]
    fn single_low_step_pruned() {
        let mut sp = space();
        set_p(&mut sp, 3, &[0.04, 0.30, 0.33, 0.33]);
        let ev = prune_below_threshold(&mut sp, 0.2, 5).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].removed_steps, vec![0]);
        assert!((ev[0].threshold - 0.05).abs() < 1e-15);
        assert_eq!(sp.submodules[3].d_live(), 3);
    }

    #[test]
    fn uniform_not_pruned() {
        let mut sp = space();
        assert!(prune_below_threshold(&mut sp, 0.2, 0).unwrap().is_empty());
    }

    #[test]
    fn two_steps_in_one_event() {
        let mut sp = space();
        set_p(&mut sp, 2, &[0.01, 0.01, 0.98]);
        let ev = prune_below_threshold(&mut sp, 0.2, 0).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].removed_steps, vec![0, 1]);
        assert!(sp.submodules[2].decided());
    }

    #[test]
    fn warmup_and_interval_gate() {
        let mut sp = space();
        set_p(&mut sp, 2, &[0.01, 0.01, 0.98]);
        let mut sch = PruneSchedule::new(10, 0.2, 20);
        assert_eq!(sch.interval, 4);
        assert!(maybe_prune(&mut sp, &sch, 16).unwrap().is_empty());
        assert!(maybe_prune(&mut sp, &sch, 21).unwrap().is_empty());
        sch.finished = true;
        assert!(maybe_prune(&mut sp, &sch, 24).unwrap().is_empty());
        sch.finished = false;
        assert_eq!(maybe_prune(&mut sp, &sch, 24).unwrap().len(), 1);
    }

    #[test]
    fn finish_conditions() {
        let mut sp = space();
        assert!(!finish_check(&sp, 0.1, 0.5, 0.05));
        finalize(&mut sp, 0).unwrap();
        assert!(sp.submodules.iter().all(|s| s.decided()));
        assert!(finish_check(&sp, 0.5, 0.5, 0.05));
        assert!(!finish_check(&sp, 1.0, 0.5, 0.05));
    }

    #[test]
    fn replay_reproduces_state() {
        let mut sp = space();
        for (i, s) in sp.submodules.iter_mut().enumerate() {
            for (j, v) in s.importance.data_mut().iter_mut().enumerate() {
                *v = ((i * 31 + j * 17) % 13) as f64 * 0.1;
            }
            s.alpha.data_mut()[0] = -8.0;
        }
        let initial = sp.clone();
        let mut events = prune_below_threshold(&mut sp, 0.2, 1).unwrap();
        events.extend(finalize(&mut sp, 2).unwrap());
        let mut re = initial;
        replay(&mut re, &events).unwrap();
        assert_eq!(re.export(), sp.export());
    }
}
