//! Adam with decoupled weight decay and per-coordinate freezing.

use super::PolicyParams;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
    frozen: Vec<bool>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            state: AdamState {
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
            frozen: vec![false; num_params],
        }
    }

    /// Excludes a flat index range from updates (moments stay zero there).
    pub fn freeze(&mut self, range: std::ops::Range<usize>) {
        self.frozen[range].fill(true);
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    /// One descent step on `grad`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        let s = &mut self.state;
        s.t += 1;
        let bc1 = 1.0 - self.beta1.powi(s.t as i32);
        let bc2 = 1.0 - self.beta2.powi(s.t as i32);
        for i in 0..params.data.len() {
            if self.frozen[i] {
                continue;
            }
            let g = grad.data[i];
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
            let update = (s.m[i] / bc1) / ((s.v[i] / bc2).sqrt() + self.eps);
            let p = &mut params.data[i];
            *p -= self.lr * (update + self.weight_decay * *p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn tiny() -> PolicyParams {
        PolicyParams::zeros(ModelConfig {
            vocab: 3,
            d_model: 2,
            d_ff: 2,
            n_layers: 1,
            max_len: 2,
        })
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.data[0] = 3.0;
        g.data[1] = -0.5;
        let mut opt = Adam::new(p.num_params(), 0.1);
        opt.step(&mut p, &g);
        assert!((p.data[0] + 0.1).abs() < 1e-6);
        assert!((p.data[1] - 0.1).abs() < 1e-6);
        assert_eq!(p.data[2], 0.0);
    }

    #[test]
    fn zero_lr_and_frozen_rows_leave_params() {
        let mut p = tiny();
        p.data.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.data.iter_mut().for_each(|x| *x = 1.0);
        let mut opt = Adam::new(p.num_params(), 0.0);
        opt.step(&mut p, &g);
        assert_eq!(p, before);

        let mut opt = Adam::new(p.num_params(), 0.1);
        let row = p.layout.embedding_row(1);
        opt.freeze(row.clone());
        opt.step(&mut p, &g);
        for i in row {
            assert_eq!(p.data[i], before.data[i]);
        }
        assert_ne!(p.data[0], before.data[0]);
    }
}
