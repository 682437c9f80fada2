//! Adam with per-tensor learning-rate multipliers.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i] == None` leaves tensor `i` and its moments untouched.
    pub fn update(&mut self, params: Vec<&mut Array2<T>>, grads: Vec<Option<Array2<T>>>, lr_mult: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lr_mult.len() {
            return Err(Error::Shape("optimizer argument lengths differ".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("parameter count changed between steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.dim() != p.dim() {
                return Err(Error::Shape(format!("gradient {i} has shape {:?}, parameter {:?}", g.dim(), p.dim())));
            }
            let step = T::of(self.lr * lr_mult[i] / c1);
            let c2 = T::of(c2);
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= step * *m / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::<f64>::new(0.1);
        let mut p = array![[1.0, -1.0]];
        a.update(vec![&mut p], vec![Some(array![[3.0, -0.5]])], &[1.0]).unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn multiplier_and_missing_grads() {
        let mut a = Adam::<f64>::new(0.01);
        let mut p = array![[0.0]];
        let mut q = array![[0.0]];
        let mut r = array![[5.0]];
        a.update(
            vec![&mut p, &mut q, &mut r],
            vec![Some(array![[1.0]]), Some(array![[1.0]]), None],
            &[1.0, 10.0, 10.0],
        )
        .unwrap();
        assert!((p[[0, 0]] + 0.01).abs() < 1e-8);
        assert!((q[[0, 0]] + 0.1).abs() < 1e-7);
        assert_eq!(r[[0, 0]], 5.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::<f64>::new(0.05);
        let mut p = array![[3.0, -2.0]];
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            a.update(vec![&mut p], vec![Some(g)], &[1.0]).unwrap();
        }
        assert!((p[[0, 0]] - 1.0).abs() < 1e-3 && (p[[0, 1]] - 1.0).abs() < 1e-3);
    }
}
