use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use super::Parameterized;
use crate::scalar::Scalar;

/// Adam with bias correction. Moment buffers are keyed by parameter name, so
/// only parameters actually passed to [`Adam::step`] ever enter its state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// Names of every parameter this optimizer has updated.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update using the gradients currently stored in `model`.
    pub fn step(&mut self, model: &mut dyn Parameterized<T>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let moments = &mut self.moments;
        model.visit_mut("", &mut |name, p| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Parameterized};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut lin = Linear::<f64>::new(2, 1);
        lin.weight.grad.assign(&ndarray::arr2(&[[3.0, -0.5]]).into_dyn());
        let mut opt = Adam::new(0.01);
        opt.step(&mut lin);
        let w = lin.weight.value.as_slice().unwrap();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-9);
        // zero gradient on the bias: no movement
        assert_eq!(lin.bias.value.as_slice().unwrap(), &[0.0]);
        assert_eq!(opt.tracked().collect::<Vec<_>>(), vec!["bias", "weight"]);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut lin = Linear::<f32>::new(3, 2);
        lin.init_params(0, &crate::nn::default_init);
        lin.weight.grad.fill(1.0);
        let before = lin.state_dict();
        Adam::new(0.0).step(&mut lin);
        assert_eq!(before, lin.state_dict());
    }
}
