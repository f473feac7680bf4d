use super::DiffError;

/// Numerical stabilizer added to the denominator of the Adam update.
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers and step counter for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update with multiplicative weight shrinkage.
///
/// The retention factor `weight` is applied as `params <- weight * params`
/// before the Adam delta; `weight = 1` disables it. With a zero gradient the
/// Adam delta is zero, so only the shrinkage acts.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight: f64,
) -> Result<(), DiffError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(DiffError::shape(
            "adam_step",
            format!(
                "params ({}), grads ({}), and state ({}) lengths differ",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
        if !(b > 0.0 && b < 1.0) {
            return Err(DiffError::InvalidParameter(format!(
                "{name} must lie in (0, 1), got {b}"
            )));
        }
    }
    if !(lr > 0.0) {
        return Err(DiffError::InvalidParameter(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let mc = 1.0 - beta1.powi(t);
    let vc = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        params[i] *= weight;
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / mc;
        let v_hat = state.v[i] / vc;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_signed_learning_rate() {
        // With bias correction, m_hat = g and v_hat = g^2 on step one, so the
        // delta is -lr * g / (|g| + eps) for any betas.
        for g in [0.3, -7.0, 1e-3] {
            let mut params = vec![2.0];
            let mut state = AdamState::new(1);
            adam_step(&mut params, &[g], &mut state, 0.01, 0.98, 0.99, 1.0).unwrap();
            let delta = params[0] - 2.0;
            assert!(
                (delta + 0.01 * g.signum()).abs() < 1e-6,
                "g={g}: delta={delta}"
            );
        }
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = vec![1.25, -3.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[0.0, 0.0], &mut state, 0.1, 0.98, 0.99, 1.0).unwrap();
        assert_eq!(params, vec![1.25, -3.0]);
    }

    #[test]
    fn zero_grad_with_shrinkage_scales_params() {
        let mut params = vec![1.0, -4.0];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[0.0, 0.0], &mut state, 0.1, 0.98, 0.99, 0.95).unwrap();
        assert_eq!(params, vec![0.95, -3.8]);
    }

    #[test]
    fn rejects_invalid_hyperparameters() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        assert!(adam_step(&mut params, &[0.0], &mut state, 0.0, 0.98, 0.99, 1.0).is_err());
        assert!(adam_step(&mut params, &[0.0], &mut state, 0.1, 1.0, 0.99, 1.0).is_err());
        assert!(adam_step(&mut params, &[0.0, 1.0], &mut state, 0.1, 0.98, 0.99, 1.0).is_err());
    }
}
