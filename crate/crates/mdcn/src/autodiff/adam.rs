//! Adam optimizer with bias correction.

use super::tensor::Tensor;
use crate::error::Error;

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_shapes: &[Vec<usize>], learning_rate: f64) -> Self {
        OptimizerState {
            m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all tracked parameters. Gradient order must match
    /// the shape list given at construction.
    pub fn adam_step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<(), Error> {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::Autodiff(format!(
                    "NaN or infinite gradient in parameter {i}"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                let gk = g.data()[k];
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * gk;
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = md[k] / bc1;
                let v_hat = vd[k] / bc2;
                pd[k] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::matrix(1, 2, vec![0.5, -0.25]);
        let mut st = OptimizerState::new(&[vec![1, 2]], 1e-3);
        st.adam_step(&mut [&mut p], &[Tensor::zeros(vec![1, 2])]).unwrap();
        assert_eq!(p.data(), &[0.5, -0.25]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // After bias correction, |update| is close to lr for any gradient.
        for &g in &[3.0, -0.004, 1e4] {
            let mut p = Tensor::scalar(0.0);
            let mut st = OptimizerState::new(&[vec![1]], 1e-2);
            st.adam_step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            let update = p.item().abs();
            assert!(update <= 1e-2 * (1.0 + 1e-6), "update {update}");
            assert!(update >= 1e-2 * 0.99, "update {update}");
            assert_eq!(p.item().signum(), -g.signum());
        }
    }

    #[test]
    fn three_step_trace_matches_hand_recursion() {
        let grads = [0.7, -1.3, 0.2];
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let mut p = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(&[vec![1]], lr);

        // Hand-computed Adam recursion on a scalar parameter.
        let (mut hp, mut hm, mut hv) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            st.adam_step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
            hm = b1 * hm + (1.0 - b1) * g;
            hv = b2 * hv + (1.0 - b2) * g * g;
            let mh = hm / (1.0 - b1.powi(t as i32 + 1));
            let vh = hv / (1.0 - b2.powi(t as i32 + 1));
            hp -= lr * mh / (vh.sqrt() + eps);
            assert!(
                (p.item() - hp).abs() < 1e-12,
                "step {t}: {} vs {}",
                p.item(),
                hp
            );
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = Tensor::scalar(0.0);
        let mut st = OptimizerState::new(&[vec![1]], 1e-3);
        let err = st
            .adam_step(&mut [&mut p], &[Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("gradient"));
    }
}
