use regex::Regex;

use crate::error::{Error, Result};
use crate::tensorcore::{ParamGrads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// First-order optimizer state. Only parameters whose names match `filter`
/// (all parameters when `None`) are updated.
#[derive(Clone, Debug)]
pub struct OptState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub step: usize,
    pub filter: Option<Regex>,
    pub kind: OptKind,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl OptState {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Result<Self> {
        Self::new(learning_rate, momentum, OptKind::Sgd)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, 0.9, OptKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 })
    }

    fn new(learning_rate: f64, momentum: f64, kind: OptKind) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum {momentum}")));
        }
        Ok(OptState { learning_rate, momentum, step: 0, filter: None, kind, first: Vec::new(), second: Vec::new() })
    }

    pub fn with_filter(mut self, filter: Regex) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn updates(&self, name: &str) -> bool {
        self.filter.as_ref().is_none_or(|f| f.is_match(name))
    }

    /// One update with learning rate `learning_rate * lr_scale`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr_scale: f64) {
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.step += 1;
        let lr = self.learning_rate * lr_scale;
        for i in 0..n {
            if !self.updates(store.name_at(i)) {
                continue;
            }
            let g = grads.get(i);
            match self.kind {
                OptKind::Sgd => {
                    let dir = if self.momentum > 0.0 {
                        let v = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                        for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                            *vv = self.momentum * *vv + gg;
                        }
                        v.clone()
                    } else {
                        g.clone()
                    };
                    for (p, d) in store.value_at_mut(i).data_mut().iter_mut().zip(dir.data()) {
                        *p -= lr * d;
                    }
                }
                OptKind::Adam { beta1, beta2, eps } => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for (mm, gg) in m.data_mut().iter_mut().zip(g.data()) {
                        *mm = beta1 * *mm + (1.0 - beta1) * gg;
                    }
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    for (vv, gg) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = beta2 * *vv + (1.0 - beta2) * gg * gg;
                    }
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let (m, v) = (self.first[i].as_ref().unwrap(), self.second[i].as_ref().unwrap());
                    for ((p, mm), vv) in store.value_at_mut(i).data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        *p -= lr * (mm / c1) / ((vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Learning-rate multiplier: linear warmup over the first `warmup` steps,
/// then cosine decay to zero at `total`.
pub fn cosine_schedule(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.gamma", Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        s.insert("a.w", Tensor::from_rows(&[[3.0]]).unwrap());
        s
    }

    fn grads(s: &ParamStore, v: f64) -> ParamGrads {
        let mut g = ParamGrads::zeros_like(s);
        g.add_to(0, &Tensor::filled(&[1, 2], v));
        g.add_to(1, &Tensor::filled(&[1, 1], v));
        g
    }

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut s = store();
        let mut opt = OptState::sgd(0.1, 0.9).unwrap();
        let g = grads(&s, 1.0);
        opt.apply(&mut s, &g, 1.0);
        opt.apply(&mut s, &g, 1.0);
        // velocity 1 then 1.9
        assert!((s.get("a.w").unwrap().item() - (3.0 - 0.1 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn filter_and_zero_rate_leave_parameters_untouched() {
        let mut s = store();
        let before = s.clone();
        let mut opt = OptState::sgd(0.0, 0.9).unwrap();
        for _ in 0..5 {
            opt.apply(&mut s, &grads(&before, 0.7), 1.0);
        }
        assert_eq!(s.get("a.w"), before.get("a.w"));
        assert_eq!(s.get("a.gamma"), before.get("a.gamma"));
        let mut opt = OptState::sgd(1.0, 0.0).unwrap().with_filter(Regex::new(r"\.gamma$").unwrap());
        opt.apply(&mut s, &grads(&before, 0.5), 1.0);
        assert_eq!(s.get("a.w"), before.get("a.w"));
        assert_eq!(s.get("a.gamma").unwrap().data(), &[0.5, 1.5]);
        assert!(OptState::sgd(-1.0, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut s = store();
        let mut opt = OptState::adam(0.01).unwrap();
        opt.apply(&mut s, &grads(&store(), 4.0), 1.0);
        assert!((s.get("a.w").unwrap().item() - (3.0 - 0.01)).abs() < 1e-8);
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_schedule(0, 100, 10) - 0.1).abs() < 1e-12);
        assert!((cosine_schedule(9, 100, 10) - 1.0).abs() < 1e-12);
        assert!((cosine_schedule(10, 100, 10) - 1.0).abs() < 1e-12);
        assert!((cosine_schedule(55, 100, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_schedule(100, 100, 10).abs() < 1e-12);
    }
}
