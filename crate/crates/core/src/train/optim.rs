//! AdamW with decoupled weight decay and a warmup-plus-cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::{Element, Module, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments in parameter visiting order.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new<M: Module<T>>(model: &M, hyper: AdamW) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| {
            if p.learnable {
                m.push(Tensor::zeros(p.value.shape()));
            }
        });
        OptimState {
            hyper,
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One update. Decay (`p ← p − lr·wd·p`) applies only to parameters flagged
/// for it and is independent of the moment estimates.
pub fn adamw_step<T: Element, M: Module<T>>(model: &mut M, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    let mut missing = None;
    let mut count = 0;
    model.visit(&mut |p| {
        if p.learnable {
            if p.grad.is_none() && missing.is_none() {
                missing = Some(p.name.clone());
            }
            count += 1;
        }
    });
    if let Some(name) = missing {
        return Err(Error::Training(format!("{name} has no gradient")));
    }
    if count != state.m.len() {
        return Err(Error::Training(format!(
            "optimizer holds {} moments for {count} parameters",
            state.m.len()
        )));
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (ob1, ob2) = (T::lit(1.0 - h.beta1), T::lit(1.0 - h.beta2));
    let step = T::lit(lr / c1);
    let rc2 = T::lit(1.0 / c2.sqrt());
    let eps = T::lit(h.eps);
    let mut i = 0;
    model.visit_mut(&mut |p| {
        if !p.learnable {
            return;
        }
        let shrink = T::lit(1.0 - lr * h.weight_decay);
        let decay = p.decay && h.weight_decay != 0.0;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = p.grad.as_ref().expect("checked").data();
        for (((w, m), v), &g) in p.value.data_mut().iter_mut().zip(m).zip(v).zip(g) {
            if decay {
                *w *= shrink;
            }
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            *w -= step * *m / ((*v).sqrt() * rc2 + eps);
        }
        i += 1;
    });
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element, M: Module<T>>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit(&mut |p| {
        if let Some(g) = &p.grad {
            sq += g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        model.visit_mut(&mut |p| {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        });
    }
    norm
}

/// Linear warmup then cosine decay, in optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }
}

/// Learning rate at `step`; the update with index `s` (from 0) uses
/// `cosine_lr(s + 1)`.
pub fn cosine_lr(s: &Schedule, step: usize) -> f64 {
    let warm = s.warmup_steps();
    if step < warm {
        return s.base_lr * step as f64 / warm as f64;
    }
    let span = s.total_steps().saturating_sub(warm);
    let t = if span == 0 {
        1.0
    } else {
        ((step - warm) as f64 / span as f64).min(1.0)
    };
    s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Parameter;

    struct Scalar(Parameter<f64>);

    impl Module<f64> for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
            f(&mut self.0)
        }
    }

    fn scalar(p: f64, g: f64, decay: bool) -> Scalar {
        let mut s = Scalar(Parameter::new("p", Tensor::from_vec(&[1], vec![p]).unwrap(), decay));
        s.0.grad = Some(Tensor::from_vec(&[1], vec![g]).unwrap());
        s
    }

    #[test]
    fn adamw_examples() {
        let no_decay = AdamW { weight_decay: 0.0, ..AdamW::default() };
        let mut s = scalar(0.7, 0.0, true);
        let mut st = OptimState::new(&s, no_decay);
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.0.value.data()[0], 0.7);

        let mut s = scalar(1.0, 1.0, true);
        let mut st = OptimState::new(&s, no_decay);
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        assert!((s.0.value.data()[0] - 0.9).abs() < 1e-8);

        let mut s = scalar(2.0, 0.0, true);
        let mut st = OptimState::new(&s, AdamW::default());
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        assert!((s.0.value.data()[0] - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = scalar(1.0, 1.0, true);
        s.0.grad = None;
        let mut st = OptimState::new(&s, AdamW::default());
        let e = adamw_step(&mut s, &mut st, 0.1).unwrap_err().to_string();
        assert!(e.contains('p'), "{e}");
    }

    #[test]
    fn quadratic_decreases() {
        let mut s = scalar(1.5, 3.0, true);
        let mut st = OptimState::new(&s, AdamW::default());
        adamw_step(&mut s, &mut st, 1e-3).unwrap();
        let p = s.0.value.data()[0];
        assert!(p * p < 1.5 * 1.5);
    }

    #[test]
    fn schedule_boundaries() {
        let s = Schedule {
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 5,
            total_epochs: 25,
            steps_per_epoch: 4,
        };
        assert_eq!(cosine_lr(&s, 0), 0.0);
        assert_eq!(cosine_lr(&s, 20), 1e-3);
        assert!((cosine_lr(&s, 100) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(&s, 60) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((cosine_lr(&s, 10) - 5e-4).abs() < 1e-18);
    }
}
