//! First-order update rules for pixel optimization.

use ndarray::{Array3, Zip};

use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    step_size: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    t: i32,
    m: Array3<T>,
    v: Array3<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(dim: (usize, usize, usize), step_size: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step_size: T::of(step_size),
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            epsilon: T::of(epsilon),
            t: 0,
            m: Array3::zeros(dim),
            v: Array3::zeros(dim),
        }
    }

    /// Bias-corrected adaptive-moment update of `params` in place.
    pub fn step(&mut self, params: &mut Array3<T>, grad: &Array3<T>) {
        self.t += 1;
        let one = T::one();
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let (lr, eps) = (self.step_size, self.epsilon);
        Zip::from(params)
            .and(grad)
            .and(&mut self.m)
            .and(&mut self.v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

#[derive(Debug, Clone)]
pub struct GradientDescent<T> {
    step_size: T,
}

impl<T: Real> GradientDescent<T> {
    pub fn new(step_size: f64) -> Self {
        Self {
            step_size: T::of(step_size),
        }
    }

    pub fn step(&mut self, params: &mut Array3<T>, grad: &Array3<T>) {
        params.scaled_add(-self.step_size, grad);
    }
}
