//! First-order optimizers over flat parameter vectors.
//!
//! Weight decay is decoupled from the gradient step in both optimizers:
//! parameters are first scaled by `1 − lr·weight_decay`, then updated.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Self::Sgd => 1e-2,
            Self::Adam => 1e-3,
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Mutable optimizer state; serializable so training can resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64, num_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => num_params,
            OptimizerKind::Sgd => 0,
        };
        Self {
            kind,
            learning_rate,
            weight_decay,
            step: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "optimizer: gradient length");
        self.step += 1;
        let lr = self.learning_rate;
        let decay = 1.0 - lr * self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p = *p * decay - lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (k, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[k];
                    let v = &mut self.second_moment[k];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p = *p * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = ½ Σ a_k (x_k − c_k)²
    fn quad_grad(x: &[f64], a: &[f64], c: &[f64]) -> Vec<f64> {
        x.iter().zip(a).zip(c).map(|((x, a), c)| a * (x - c)).collect()
    }

    #[test]
    fn adam_follows_reference_equations() {
        let a = [1.0, 10.0, 0.1];
        let c = [0.5, -1.0, 2.0];
        let (lr, wd) = (0.05, 0.01);
        let mut x = vec![1.0, 1.0, 1.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr, wd, 3);

        let mut rx = x.clone();
        let (mut rm, mut rv) = ([0.0; 3], [0.0; 3]);
        for t in 1..=50 {
            let g = quad_grad(&x, &a, &c);
            opt.update(&mut x, &g);

            let rg = quad_grad(&rx, &a, &c);
            for k in 0..3 {
                rx[k] -= lr * wd * rx[k];
                rm[k] = 0.9 * rm[k] + 0.1 * rg[k];
                rv[k] = 0.999 * rv[k] + 0.001 * rg[k] * rg[k];
                let mh = rm[k] / (1.0 - 0.9f64.powi(t));
                let vh = rv[k] / (1.0 - 0.999f64.powi(t));
                rx[k] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for k in 0..3 {
                assert!((x[k] - rx[k]).abs() < 1e-12, "step {t} coord {k}");
            }
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let a = [1.0, 2.0];
        let c = [3.0, -1.0];
        let mut x = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0, 2);
        for _ in 0..500 {
            let g = quad_grad(&x, &a, &c);
            opt.update(&mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-9 && (x[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut x = vec![0.3, -0.7];
            let before = x.clone();
            let mut opt = Optimizer::new(kind, 0.0, 0.5, 2);
            opt.update(&mut x, &[1.0, -2.0]);
            assert_eq!(x, before);
        }
    }
}
