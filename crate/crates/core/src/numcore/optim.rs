use super::params::ParamStore;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's grad slots. Parameters without a
    /// gradient, or with `requires_grad` unset, are left alone.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, (w, g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
