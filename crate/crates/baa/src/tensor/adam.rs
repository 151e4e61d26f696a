//! Adam optimiser.

use super::dense::Tensor;
use super::scalar::Scalar;

#[derive(Debug, PartialEq, Eq, Clone, Copy)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained a NaN or infinity; no state was touched.
    SkippedNonFinite,
}

/// Adam with bias correction. First and second moment buffers are allocated
/// lazily to match the parameter shapes on the first step.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` pairs with `params[i]`; `None` means
    /// zero gradient (the moments still decay).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) -> StepOutcome {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if grads
            .iter()
            .flatten()
            .any(|g| !g.all_finite())
        {
            return StepOutcome::SkippedNonFinite;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let lr = T::from_f64(self.lr / bc1);
        let eps_scaled = T::from_f64(self.eps);
        let vscale = T::from_f64(1.0 / bc2);

        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(
                p.shape(),
                self.m[i].shape(),
                "parameter {i} changed shape mid-run"
            );
            let zero = Tensor::zeros(p.shape());
            let g = grads[i].as_ref().unwrap_or(&zero);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let vhat = *vv * vscale;
                *pv = *pv - lr * *mv / (vhat.sqrt() + eps_scaled);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        // With a constant gradient the bias-corrected first step is lr *
        // g/|g| up to eps, for any gradient magnitude.
        for &gmag in &[1e-4f32, 1.0, 1e4] {
            let mut p = Tensor::from_vec(&[2], vec![1.0f32, -3.0]).unwrap();
            let g = Tensor::from_vec(&[2], vec![gmag, -gmag]).unwrap();
            let mut adam = Adam::new(1e-3);
            let out = adam.step(&mut [&mut p], &[Some(g)]);
            assert_eq!(out, StepOutcome::Applied);
            let d0 = (p.data()[0] - 1.0).abs();
            let d1 = (p.data()[1] + 3.0).abs();
            assert!((d0 - 1e-3).abs() < 1e-5, "step {d0} for |g|={gmag}");
            assert!((d1 - 1e-3).abs() < 1e-5, "step {d1} for |g|={gmag}");
            // direction follows the gradient sign
            assert!(p.data()[0] < 1.0 && p.data()[1] > -3.0);
        }
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut p = Tensor::from_vec(&[1], vec![1.0f32]).unwrap();
        let g = Tensor::from_vec(&[1], vec![f32::NAN]).unwrap();
        let mut adam = Adam::new(1e-3);
        assert_eq!(adam.step(&mut [&mut p], &[Some(g)]), StepOutcome::SkippedNonFinite);
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimise (p - 5)^2
        let mut p = Tensor::from_vec(&[1], vec![0.0f32]).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..2000 {
            let g = Tensor::from_vec(&[1], vec![2.0 * (p.data()[0] - 5.0)]).unwrap();
            adam.step(&mut [&mut p], &[Some(g)]);
        }
        assert!((p.data()[0] - 5.0).abs() < 1e-2, "{}", p.data()[0]);
    }
}
