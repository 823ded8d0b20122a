use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// Applies one Adam update to every parameter, then zeroes the gradients.
pub fn optimizer_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(TensorError::Usage(format!(
            "optimizer tracks {} tensors, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(TensorError::Usage(format!(
                "parameter {i} has no gradient; run backward first"
            )));
        }
        if state.first_moment[i].len() != p.numel() {
            return Err(TensorError::DataLength {
                shape: p.shape().to_vec(),
                expected: p.numel(),
                got: state.first_moment[i].len(),
            });
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((w, &g), m), v) in p
            .data
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = Some(grad);
        p.zero_grad();
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for v in g {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f32, grad: f32) -> Tensor {
        let mut t = Tensor::scalar(value);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![param(0.5, 0.0), param(-2.0, 0.0)];
        let mut state = OptimizerState::new(&params, AdamConfig::default());
        optimizer_step(&mut params, &mut state).unwrap();
        assert_eq!(params[0].item(), 0.5);
        assert_eq!(params[1].item(), -2.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![param(0.0, 1.0)];
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = OptimizerState::new(&params, config);
        optimizer_step(&mut params, &mut state).unwrap();
        assert!((params[0].item() + 0.1).abs() < 1e-6);
        assert_eq!(params[0].grad().unwrap(), &[0.0]);
    }

    #[test]
    fn repeated_gradient_does_not_grow_step() {
        let mut params = vec![param(0.0, 0.3)];
        let mut state = OptimizerState::new(&params, AdamConfig::default());
        optimizer_step(&mut params, &mut state).unwrap();
        let first = params[0].item().abs();
        params[0].accumulate_grad(&[0.3]).unwrap();
        let before = params[0].item();
        optimizer_step(&mut params, &mut state).unwrap();
        let second = (params[0].item() - before).abs();
        assert!(second <= first * 1.01, "{second} vs {first}");
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = OptimizerState::new(&params, AdamConfig::default());
        assert!(matches!(
            optimizer_step(&mut params, &mut state),
            Err(TensorError::Usage(_))
        ));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut params = vec![param(0.0, 3.0), param(0.0, 4.0)];
        let norm = clip_grad_norm(&mut params, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        assert!((params[0].grad().unwrap()[0] - 0.6).abs() < 1e-6);
        assert!((params[1].grad().unwrap()[0] - 0.8).abs() < 1e-6);
    }
}
