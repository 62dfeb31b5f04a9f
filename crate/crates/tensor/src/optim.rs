use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{GradSet, ParamSet};
use crate::tensor::Tensor;

fn lookup<'a>(params: &'a mut ParamSet, name: &str, grad: &Tensor) -> Result<&'a mut Tensor> {
    let p = params.get_mut(name)?;
    if p.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer step",
            lhs: p.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    Ok(p)
}

/// `p -= lr * g` for every gradient in `grads`.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = lookup(params, name, g)?;
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with per-parameter moment estimates and bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter named in `grads`.
    ///
    /// Step counts are tracked per parameter, so a parameter that only
    /// receives gradients occasionally still gets correct bias correction.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = lookup(params, name, g)?;
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gv;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gv * gv;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn sgd_converges_on_square() {
        let mut p = single("x", 1.0);
        for _ in 0..50 {
            let tape = Tape::new();
            let b = p.bind(&tape, |_| true);
            let x = b.get("x").unwrap();
            let loss = x.mul(&x).unwrap().sum().unwrap();
            let g = b.grads(&tape.backward(loss).unwrap());
            sgd_step(&mut p, &g, 0.1).unwrap();
        }
        // x_{t+1} = 0.8 x_t, so |x_50| = 0.8^50 ≈ 1.4e-5.
        assert!(p.get("x").unwrap().data()[0].abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single("x", 0.7);
        let mut g = GradSet::new();
        g.insert("x", Tensor::vector(vec![0.0]));
        sgd_step(&mut p, &g, 0.5).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.7]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![0.0, 0.0, 0.0]));
        let mut g = GradSet::new();
        g.insert("w", Tensor::vector(vec![3.0, -0.02, 1e-3]));
        let lr = 0.01;
        Adam::new(lr).step(&mut p, &g).unwrap();
        for (&v, &gv) in p.get("w").unwrap().data().iter().zip(&[3.0f64, -0.02, 1e-3]) {
            // m̂ = g and v̂ = g², so the step is lr · g / (|g| + ε).
            let want = -gv.signum() * lr * gv.abs() / (gv.abs() + 1e-8);
            assert!((v - want).abs() < 1e-15);
            assert!((v.abs() - lr).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut p = single("x", 1.0);
        let mut g = GradSet::new();
        g.insert("x", Tensor::vector(vec![1.0, 2.0]));
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
        assert!(Adam::new(0.1).step(&mut p, &g).is_err());
    }
}
