use super::params::{Grads, ParamSet};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.tensors[i]);
            for j in 0..tensor.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                tensor.data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::params::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new(vec![Tensor::filled("x", &[3], 1.0)]);
        let g = Grads {
            tensors: vec![vec![2.0, -0.5, 0.0]],
        };
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &g);
        let x = &p.tensors[0].data;
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] - 1.1).abs() < 1e-6);
        assert_eq!(x[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::new(vec![Tensor::filled("x", &[2], 5.0)]);
        let mut adam = Adam::new(&p, 0.05);
        for _ in 0..2000 {
            let x = &p.tensors[0].data;
            let g = Grads {
                tensors: vec![vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 2.0)]],
            };
            adam.step(&mut p, &g);
        }
        let x = &p.tensors[0].data;
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3, "{x:?}");
    }
}
