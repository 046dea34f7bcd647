use super::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState::default() }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "adam: {} params but {} grads", params.len(), grads.len());
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.state.v = self.state.m.clone();
        }
        assert_eq!(self.state.m.len(), params.len(), "adam: state holds {} tensors, got {}", self.state.m.len(), params.len());
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "adam: param {} shape {:?} vs grad {:?}", i, p.shape(), g.shape());
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
