use serde::{Deserialize, Serialize};

use super::fp16::{fp16_state_rescale, fp16_state_unscale};
use crate::error::{Error, Result};
use crate::model::{is_expert_param, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keep moments rescaled and rounded to FP16 between steps.
    pub fp16_state: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            fp16_state: false,
        }
    }
}

/// First and second moments of one parameter. When stored in FP16 form the
/// buffers hold scaled values and `scale_m`/`scale_v` hold the divisors.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub scale_m: Option<f64>,
    pub scale_v: Option<f64>,
}

impl<T: Scalar> Moments<T> {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
            scale_m: None,
            scale_v: None,
        }
    }

    fn unscaled(&self) -> (Vec<T>, Vec<T>) {
        let m = match self.scale_m {
            Some(d) => fp16_state_unscale(&self.m, d),
            None => self.m.clone(),
        };
        let v = match self.scale_v {
            Some(d) => fp16_state_unscale(&self.v, d),
            None => self.v.clone(),
        };
        (m, v)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            moments: params
                .iter()
                .map(|p| Moments::zeros(p.value.numel()))
                .collect(),
        }
    }

    /// One update with learning rate `lr`. Every gradient is checked before
    /// anything is modified, so a non-finite gradient leaves parameters and
    /// state untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for p in params.iter() {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (p, state) in params.iter_mut().zip(self.moments.iter_mut()) {
            let (mut m, mut v) = state.unscaled();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i].to_f64();
                let mi = c.beta1 * m[i].to_f64() + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i].to_f64() + (1.0 - c.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let m_hat = m[i].to_f64() / bias1;
                let v_hat = v[i].to_f64() / bias2;
                let decayed = value[i].to_f64() * (1.0 - lr * c.weight_decay);
                value[i] = T::from_f64(decayed - lr * m_hat / (v_hat.sqrt() + c.eps));
            }
            if c.fp16_state {
                let (sm, dm) = fp16_state_rescale(&m, true);
                let (sv, dv) = fp16_state_rescale(&v, true);
                *state = Moments {
                    m: sm,
                    v: sv,
                    scale_m: Some(dm),
                    scale_v: Some(dv),
                };
            } else {
                state.m = m;
                state.v = v;
            }
        }
        Ok(())
    }
}

/// Multiplies the gradient of every expert parameter by `1/sqrt(experts)`.
pub fn rescale_expert_gradients<T: Scalar>(params: &mut ParamStore<T>, experts: usize) {
    if experts == 0 {
        return;
    }
    let f = T::from_f64(1.0 / (experts as f64).sqrt());
    for p in params.iter_mut().filter(|p| is_expert_param(&p.name)) {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let f = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, v) in values {
            s.insert(*name, Tensor::new(vec![v.len()], v.clone()).unwrap())
                .unwrap();
        }
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = store(&[("w", vec![0.0])]);
        ps.by_name_mut("w").unwrap().grad.data_mut()[0] = 1.0;
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &ps);
        opt.step(&mut ps, 1e-3).unwrap();
        let w = ps.by_name("w").unwrap().value.data()[0];
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled_and_applies_with_zero_grad() {
        let mut ps = store(&[("w", vec![2.0])]);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.step(&mut ps, 0.1).unwrap();
        let w = ps.by_name("w").unwrap().value.data()[0];
        assert!((w - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_rejected_without_mutation() {
        let mut ps = store(&[("a", vec![1.0, 2.0]), ("b", vec![3.0])]);
        ps.by_name_mut("a").unwrap().grad.data_mut()[0] = 0.5;
        ps.by_name_mut("b").unwrap().grad.data_mut()[0] = f64::NAN;
        let before = ps.clone();
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let err = opt.step(&mut ps, 1e-3).unwrap_err();
        assert!(err.to_string().contains('b'));
        assert_eq!(opt.step, 0);
        assert_eq!(
            ps.by_name("a").unwrap().value,
            before.by_name("a").unwrap().value
        );
        assert!(opt.moments.iter().all(|m| m.m.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn expert_gradient_rescale() {
        let mut ps = store(&[
            ("layers.1.moe.experts.0.fc1.weight", vec![1.0, -2.0]),
            ("layers.1.moe.gate.weight", vec![1.0]),
            ("layers.0.ffn.fc1.weight", vec![4.0]),
        ]);
        for p in ps.iter_mut() {
            let v = p.value.clone();
            p.grad = v;
        }
        rescale_expert_gradients(&mut ps, 4);
        assert_eq!(
            ps.by_name("layers.1.moe.experts.0.fc1.weight")
                .unwrap()
                .grad
                .data(),
            &[0.5, -1.0]
        );
        assert_eq!(
            ps.by_name("layers.1.moe.gate.weight").unwrap().grad.data(),
            &[1.0]
        );
        assert_eq!(
            ps.by_name("layers.0.ffn.fc1.weight").unwrap().grad.data(),
            &[4.0]
        );
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut ps = store(&[("a", vec![3.0]), ("b", vec![4.0])]);
        for p in ps.iter_mut() {
            let v = p.value.clone();
            p.grad = v;
        }
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut ps, 10.0), ps.grad_norm());
    }

    #[test]
    fn fp16_state_tracks_full_precision_run() {
        let init = vec![0.5, -0.25, 1.0, 0.0];
        let mut full = store(&[("w", init.clone())]);
        let mut half = store(&[("w", init)]);
        let mut a = Adam::new(AdamConfig::default(), &full);
        let mut b = Adam::new(
            AdamConfig {
                fp16_state: true,
                ..Default::default()
            },
            &half,
        );
        for step in 0..20 {
            for ps in [&mut full, &mut half] {
                let p = ps.by_name_mut("w").unwrap();
                for (i, g) in p.grad.data_mut().iter_mut().enumerate() {
                    *g = ((step * 7 + i) as f64 * 0.37).sin() * 1e-4;
                }
            }
            a.step(&mut full, 1e-3).unwrap();
            b.step(&mut half, 1e-3).unwrap();
        }
        assert!(b.moments[0].scale_m.is_some());
        let (x, y) = (full.by_name("w").unwrap(), half.by_name("w").unwrap());
        for (p, q) in x.value.data().iter().zip(y.value.data()) {
            assert!((p - q).abs() < 1e-5, "{p} vs {q}");
        }
    }
}
