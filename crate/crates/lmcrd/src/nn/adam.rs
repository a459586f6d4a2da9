//! Adaptive moment estimation optimizer.

use crate::nn::graph::ParamId;
use crate::nn::params::ParamSet;
use crate::tensor::Tensor;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pid, grad) in grads {
            let i = pid.0;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(*pid).data_mut();
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        let pid = params.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&params, 0.05);
        for _ in 0..400 {
            let mut g = Graph::new();
            let x = params.bind(&mut g, "x");
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss).unwrap();
            let pg = g.param_grads(&grads);
            opt.step(&mut params, &pg);
        }
        for v in params.tensor(pid).data() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }
}
