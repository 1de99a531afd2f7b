//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        if let Optimizer::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "adam needs betas in [0, 1) and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Moment estimates, aligned with the parameter list. Empty for SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

/// Applies one update in place. `params` and `grads` are aligned lists.
pub fn step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState, opt: &Optimizer, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {i} is {}x{}, parameter is {}x{}",
                g.rows(),
                g.cols(),
                p.rows(),
                p.cols()
            )));
        }
    }
    state.step += 1;
    match *opt {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * d;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            if state.first.is_empty() {
                state.first = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                state.second = state.first.clone();
            }
            if state.first.len() != grads.len() {
                return Err(Error::Shape(format!(
                    "optimizer state tracks {} tensors, got {}",
                    state.first.len(),
                    grads.len()
                )));
            }
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grads)
                .zip(&mut state.first)
                .zip(&mut state.second)
            {
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                for ((x, &d), (mi, vi)) in it {
                    *mi = beta1 * *mi + (1.0 - beta1) * d;
                    *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *x -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(opt: Optimizer, theta: f64, grad: f64, lr: f64, steps: usize) -> f64 {
        let mut p = Tensor::scalar(theta);
        let mut st = OptimizerState::default();
        for _ in 0..steps {
            step(&mut [&mut p], &[Tensor::scalar(grad)], &mut st, &opt, lr).unwrap();
        }
        p.item().unwrap()
    }

    #[test]
    fn sgd_basics() {
        assert_eq!(run(Optimizer::Sgd, 0.7, 0.0, 0.1, 3), 0.7);
        assert_eq!(run(Optimizer::Sgd, 0.0, 1.0, 0.1, 1), -0.1);
    }

    // Scalar Adam recursion written out independently.
    fn adam_oracle(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let opt = Optimizer::default();
        let after = run(opt, 1.0, 0.37, 1e-3, 1);
        assert!((after - (1.0 - 1e-3)).abs() < 1e-10);
        assert_eq!(after, adam_oracle(1.0, &[0.37], 1e-3, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn adam_matches_oracle_over_steps() {
        let grads = [0.5, -1.25, 2.0, 0.01, -0.3];
        let mut p = Tensor::scalar(0.2);
        let mut st = OptimizerState::default();
        let opt = Optimizer::Adam { beta1: 0.8, beta2: 0.95, eps: 1e-6 };
        for g in grads {
            step(&mut [&mut p], &[Tensor::scalar(g)], &mut st, &opt, 0.05).unwrap();
        }
        let want = adam_oracle(0.2, &grads, 0.05, 0.8, 0.95, 1e-6);
        assert!((p.item().unwrap() - want).abs() < 1e-15);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn misaligned_gradients() {
        let mut p = Tensor::zeros(2, 2);
        let mut st = OptimizerState::default();
        let opt = Optimizer::Sgd;
        assert!(step(&mut [&mut p], &[], &mut st, &opt, 0.1).is_err());
        assert!(step(&mut [&mut p], &[Tensor::zeros(1, 2)], &mut st, &opt, 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::scalar(3.0), Tensor::scalar(4.0)];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item().unwrap() - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::scalar(0.1)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item().unwrap(), 0.1);
    }

    #[test]
    fn bad_adam_config() {
        assert!(Optimizer::Adam { beta1: 1.0, beta2: 0.9, eps: 1e-8 }.validate().is_err());
        assert!(Optimizer::default().validate().is_ok());
    }
}
