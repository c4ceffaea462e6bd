use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Moment estimates for bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Applies one Adam update using the gradients held in `store`, then clears
/// them. Every parameter must have a populated gradient buffer.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter `{}` has no gradient", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let param = store.param_mut(id);
        let grad = param.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.shape() != grad.shape() {
            return Err(Error::State(format!("moment shape mismatch for `{}`", param.name)));
        }
        for (((w, &g), mi), vi) in param
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.register(format!("p{i}"), ParamGroup::Other, Tensor::scalar(v)).unwrap();
        }
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[1.0]);
        let mut st = AdamState::new(&s);
        let id = s.id("p0").unwrap();
        s.accumulate_grad(id, &Tensor::scalar(2.0)).unwrap();
        adam_step(&mut s, &mut st, 0.1).unwrap();
        let delta = s.value(id).item() - 1.0;
        assert!((delta + 0.1).abs() < 1e-8, "{delta}");
        assert!(s.param(id).grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(&[0.7]);
        let mut st = AdamState::new(&s);
        s.zero_grads();
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.value(s.id("p0").unwrap()).item(), 0.7);
    }

    #[test]
    fn equal_gradients_give_equal_updates() {
        let mut s = store_with(&[0.0, 0.0]);
        let mut st = AdamState::new(&s);
        for _ in 0..3 {
            for id in s.ids().collect::<Vec<_>>() {
                s.accumulate_grad(id, &Tensor::scalar(-0.3)).unwrap();
            }
            adam_step(&mut s, &mut st, 0.01).unwrap();
        }
        let a = s.value(s.id("p0").unwrap()).item();
        let b = s.value(s.id("p1").unwrap()).item();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut s = store_with(&[1.0]);
        let mut st = AdamState::new(&s);
        assert!(matches!(adam_step(&mut s, &mut st, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = store_with(&[0.5, -0.25]);
            let mut st = AdamState::new(&s);
            for k in 0..5 {
                for id in s.ids().collect::<Vec<_>>() {
                    s.accumulate_grad(id, &Tensor::scalar(0.1 * k as f64 - 0.2)).unwrap();
                }
                adam_step(&mut s, &mut st, 0.05).unwrap();
            }
            (s, st)
        };
        assert_eq!(run(), run());
    }
}
