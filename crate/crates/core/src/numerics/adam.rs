use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            adam_update(
                p.value.data_mut(),
                p.grad.data(),
                m.data_mut(),
                v.data_mut(),
                AdamCoeffs {
                    lr: self.lr,
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.eps,
                    weight_decay: self.weight_decay,
                    bc1,
                    bc2,
                },
            );
        }
    }
}

#[derive(Clone, Copy)]
struct AdamCoeffs {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    bc1: f64,
    bc2: f64,
}

fn adam_update(value: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], c: AdamCoeffs) {
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let mhat = m[i] / c.bc1;
        let vhat = v[i] / c.bc2;
        value[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::full(&[3], 1.5), true).unwrap();
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut store);
        assert_eq!(store.value(id).data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn one_step_on_square_decreases() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(1.0), true).unwrap();
        let mut opt = Adam::new(0.1, 0.0);
        store.get_mut(id).grad = Tensor::scalar(2.0);
        opt.step(&mut store);
        assert!(store.value(id).data()[0] < 1.0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut store = ParamStore::new();
        let id = store.insert("f", Tensor::scalar(1.0), false).unwrap();
        store.get_mut(id).grad = Tensor::scalar(5.0);
        Adam::new(0.1, 0.01).step(&mut store);
        assert_eq!(store.value(id).data()[0], 1.0);
    }

    /// Independent transcription of the Adam recursion for f(x) = Σ c_i (x_i − t_i)².
    fn reference_adam(x0: [f64; 2], steps: usize, lr: f64) -> [f64; 2] {
        let (c, target) = ([1.0, 4.0], [0.5, -1.5]);
        let (mut x, mut m, mut v) = (x0, [0.0; 2], [0.0; 2]);
        for t in 1..=steps {
            for i in 0..2 {
                let g = 2.0 * c[i] * (x[i] - target[i]);
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        x
    }

    #[test]
    fn quadratic_converges_and_matches_reference() {
        let (c, target) = ([1.0, 4.0], [0.5, -1.5]);
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new(vec![2], vec![2.0, 2.0]).unwrap(), true).unwrap();
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..200 {
            store.zero_grads();
            let x = store.value(id).data().to_vec();
            let g: Vec<f64> = (0..2).map(|i| 2.0 * c[i] * (x[i] - target[i])).collect();
            store.get_mut(id).grad = Tensor::new(vec![2], g).unwrap();
            opt.step(&mut store);
        }
        let got = store.value(id).data();
        let want = reference_adam([2.0, 2.0], 200, 0.1);
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        let dist = ((got[0] - target[0]).powi(2) + (got[1] - target[1]).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance {dist}");
    }
}
