use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to `lr` over `ceil(warmup_fraction * total_steps)`
/// steps, constant afterwards.
pub fn lr_at(step: usize, total_steps: usize, warmup_fraction: f64, lr: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

/// Adam with bias correction; moments are kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Self {
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Callers check gradients for finiteness first.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *x = (*x as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_points() {
        assert_eq!(lr_at(0, 1000, 0.1, 2.0), 0.0);
        assert_eq!(lr_at(50, 1000, 0.1, 2.0), 1.0);
        assert_eq!(lr_at(100, 1000, 0.1, 2.0), 2.0);
        assert_eq!(lr_at(900, 1000, 0.1, 2.0), 2.0);
        assert_eq!(lr_at(0, 1000, 0.0, 2.0), 2.0);
        // ceil(0.1 * 15) = 2
        assert_eq!(lr_at(1, 15, 0.1, 2.0), 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![0.5, -1.25]);
        let mut adam = Adam::new(&[&p]);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Tensor::zeros(vec![2])], 0.1);
        }
        assert_eq!(p.data(), &[0.5, -1.25]);
    }

    #[test]
    fn first_step_closed_form() {
        // m1 = 0.1 g, v1 = 0.001 g^2; corrected m = g, v = g^2; update = lr * g / (|g| + eps).
        let mut p = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(&[&p]);
        adam.step(vec![&mut p], &[Tensor::vector(vec![1.0])], 0.01);
        let expect = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] as f64 - expect).abs() < 1e-7);
    }
}
