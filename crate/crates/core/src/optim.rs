//! Adam with optional decoupled weight decay, keyed by parameter name.

use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to tensors of rank ≥ 2.
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Advances the bias-correction counter; call once per iteration.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, rank: usize, param: &mut [f64], grad: &[f64]) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = if rank >= 2 { self.lr * self.weight_decay } else { 0.0 };
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param[i] -= self.lr * mh / (vh.sqrt() + self.eps) + decay * param[i];
        }
    }

    /// Keeps only the moment entries at `keep` for `name` (after pruning).
    pub fn retain(&mut self, name: &str, keep: &[usize]) {
        if let Some((m, v)) = self.moments.get_mut(name) {
            *m = keep.iter().map(|&i| m[i]).collect();
            *v = keep.iter().map(|&i| v[i]).collect();
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(0.1, 0.9, 0.0);
        a.begin_step();
        let mut p = vec![1.0, 1.0];
        a.update("x", 1, &mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn retain_drops_entries() {
        let mut a = Adam::new(0.1, 0.5, 0.0);
        a.begin_step();
        let mut p = vec![0.0; 3];
        a.update("a", 1, &mut p, &[1.0, 2.0, 3.0]);
        a.retain("a", &[0, 2]);
        let (m, _) = a.moments("a").unwrap();
        assert_eq!(m, &[0.5, 1.5]);
    }
}
