use super::{ParamId, ParamStore, Parameter, Tensor};

pub trait Optimizer {
    /// Applies one update from the gradients stored in `store`.
    fn step(&mut self, store: &mut ParamStore);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let lr = self.lr;
            let Parameter { value, grad, .. } = p;
            for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(ParamId, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        if self.moments.is_empty() {
            self.moments = store
                .ids()
                .filter(|&id| store.get(id).trainable)
                .map(|id| {
                    let shape = store.value(id).shape().to_vec();
                    (id, Tensor::zeros(shape.clone()), Tensor::zeros(shape))
                })
                .collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, m, v) in &mut self.moments {
            let Parameter { value, grad, .. } = store.get_mut(*id);
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((x, &g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}
