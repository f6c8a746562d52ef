//! Adam with bias correction and a hard refusal to apply non-finite
//! gradients: a poisoned step would silently corrupt every parameter, so
//! the optimizer checks first and reports which tensor went bad.

use super::network::ParamTensor;
use super::tensor::Tensor;
use super::NnError;

/// Adam state for one parameter list. Moment buffers are keyed by position,
/// so the same `Vec<ParamTensor>` must be passed on every step.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        self.lr = lr;
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update, consuming (and clearing) `grad` on every parameter.
    ///
    /// Validates every gradient before touching any parameter: if any entry
    /// is non-finite the whole step is refused, parameters are left exactly
    /// as they were, and the offending tensor is named. A parameter whose
    /// `grad` is `None` is treated as having a zero gradient (its moments
    /// still decay).
    pub fn step(&mut self, params: &mut [ParamTensor]) -> Result<(), NnError> {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.values.shape()))
                .collect();
            self.v = params
                .iter()
                .map(|p| Tensor::zeros(p.values.shape()))
                .collect();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "optimizer was initialized for a different parameter list"
        );
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    let max_abs = g.data().iter().fold(0.0f64, |acc, x| {
                        if x.is_nan() {
                            f64::NAN
                        } else {
                            acc.max(x.abs())
                        }
                    });
                    return Err(NnError::NonFiniteGradient {
                        param: p.name.clone(),
                        max_abs,
                    });
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.values.data_mut();
            match grad {
                Some(g) => {
                    for (((wi, gi), mi), vi) in w
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *wi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
                None => {
                    for ((wi, mi), vi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi *= self.beta1;
                        *vi *= self.beta2;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *wi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Vec<ParamTensor> {
        vec![ParamTensor {
            name: "w".into(),
            values: Tensor::from_vec(&[1], vec![value]),
            grad: None,
        }]
    }

    /// First step with g = 1: m_hat = 1, v_hat = 1, so the update is
    /// -lr / (1 + eps) ≈ -lr regardless of the raw moment magnitudes.
    #[test]
    fn first_step_moves_by_lr() {
        let mut params = one_param(0.0);
        params[0].grad = Some(Tensor::from_vec(&[1], vec![1.0]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut params).unwrap();
        let w = params[0].values.data()[0];
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "w = {w}");
        assert!(params[0].grad.is_none(), "grad must be consumed");
    }

    /// Two steps with constant gradient, checked against a hand-run of the
    /// update rule.
    #[test]
    fn second_step_matches_hand_computation() {
        let mut params = one_param(0.0);
        let mut opt = Adam::new(0.1);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            params[0].grad = Some(Tensor::from_vec(&[1], vec![2.0]));
            opt.step(&mut params).unwrap();
            m = b1 * m + (1.0 - b1) * 2.0;
            v = b2 * v + (1.0 - b2) * 4.0;
            let m_hat = m / (1.0 - b1f(t, b1));
            let v_hat = v / (1.0 - b1f(t, b2));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!(
            (params[0].values.data()[0] - w).abs() < 1e-15,
            "adam = {}, hand = {w}",
            params[0].values.data()[0]
        );
    }

    fn b1f(t: i32, b: f64) -> f64 {
        b.powi(t)
    }

    #[test]
    fn nan_gradient_refused_without_touching_params() {
        let mut params = one_param(1.5);
        params[0].grad = Some(Tensor::from_vec(&[1], vec![f64::NAN]));
        let mut opt = Adam::new(0.1);
        let err = opt.step(&mut params).unwrap_err();
        match err {
            NnError::NonFiniteGradient { param, .. } => assert_eq!(param, "w"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        assert_eq!(params[0].values.data()[0], 1.5, "params must be untouched");
        assert_eq!(opt.steps(), 0, "refused step must not advance time");
    }

    #[test]
    fn infinite_gradient_refused() {
        let mut params = one_param(0.0);
        params[0].grad = Some(Tensor::from_vec(&[1], vec![f64::INFINITY]));
        let mut opt = Adam::new(0.1);
        assert!(opt.step(&mut params).is_err());
    }

    #[test]
    fn missing_grad_decays_moments() {
        let mut params = one_param(0.0);
        params[0].grad = Some(Tensor::from_vec(&[1], vec![1.0]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut params).unwrap();
        let after_first = params[0].values.data()[0];
        // No gradient this time: momentum still nudges the weight.
        opt.step(&mut params).unwrap();
        let after_second = params[0].values.data()[0];
        assert!(after_second < after_first, "momentum should keep moving w");
    }
}
