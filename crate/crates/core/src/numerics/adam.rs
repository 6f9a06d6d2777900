use super::{NumericsError, ParamStore, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0015,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter slot.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || (0..params.len()).map(|i| Tensor::zeros(params.value(i).shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Gradients are validated before any
/// parameter is touched, so a non-finite gradient leaves everything as it was.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NumericsError::Invalid {
            op: "adam",
            msg: format!("{} grads / {} moments for {} params", grads.len(), state.m.len(), params.len()),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.same_shape(params.value(i)) {
            return Err(NumericsError::Shape {
                op: "adam",
                lhs: params.value(i).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteGradient {
                name: params.name(i).to_string(),
                index,
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.value_mut(i).data_mut();
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g.data()[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g.data()[k] * g.data()[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &[Tensor::scalar(0.0)], &mut st).unwrap();
        assert_eq!(s.value(0).data()[0], 0.7);
        assert_eq!(st.m[0].data()[0], 0.0);
        assert_eq!(st.v[0].data()[0], 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &[Tensor::scalar(1.0)], &mut st).unwrap();
        // m_hat = v_hat = 1 -> delta = -lr / (1 + eps)
        assert!((s.value(0).data()[0] + 0.0015).abs() < 1e-6);
    }

    #[test]
    fn moment_recurrence() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &[Tensor::scalar(1.0)], &mut st).unwrap();
        adam_step(&mut s, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert_eq!(st.step, 2);
        assert!((st.m[0].data()[0] - 0.19).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let err = adam_step(&mut s, &[Tensor::scalar(f64::NAN)], &mut st).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteGradient { .. }));
        assert_eq!(st.step, 0);
        assert_eq!(s.value(0).data()[0], 1.0);
    }
}
