use serde::{Deserialize, Serialize};

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: AdamState {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    /// One update `p ← p − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        let s = &mut self.state;
        assert_eq!(params.len(), s.m.len());
        assert_eq!(grad.len(), s.m.len());
        s.step += 1;
        let t = s.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
            if lr != 0.0 {
                // skipped at zero rate so a stored -0.0 keeps its sign
                params[i] -= lr * (s.m[i] / c1) / ((s.v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_normalized() {
        // y = w·x with x = 1, label 0, w = 1: loss w², gradient 2
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut w = [1.0];
        adam.step(&mut w, &[2.0], 0.01);
        // m̂ = 2, v̂ = 4 after bias correction, so the step is 0.01·2/(2 + 1e-8)
        let expect = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((w[0] - expect).abs() < 1e-15);
        assert!((w[0] - 0.99).abs() < 1e-10);

        // the same step size for a gradient a million times larger
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut w = [1.0];
        adam.step(&mut w, &[2e6], 0.01);
        assert!((w[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn second_step_by_hand() {
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut w = [0.0];
        adam.step(&mut w, &[1.0], 0.1);
        adam.step(&mut w, &[-3.0], 0.1);
        let m = 0.9 * 0.1 + 0.1 * -3.0;
        let v = 0.999 * 0.001 + 0.001 * 9.0;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64 * 0.999);
        let expect = -0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((w[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut w = [0.1, -2.5, 3e-7];
        let before = w;
        adam.step(&mut w, &[1.0, -4.0, 0.5], 0.0);
        assert_eq!(w.map(f64::to_bits), before.map(f64::to_bits));
    }
}
