use super::params::DenoiserParams;

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step: u64,
    pub(crate) m: DenoiserParams,
    pub(crate) v: DenoiserParams,
}

impl AdamW {
    pub fn new(params: &DenoiserParams, learning_rate: f64, clip_norm: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Clips `grads` to the configured norm and applies one update. Returns the pre-clip norm.
    pub fn update(&mut self, params: &mut DenoiserParams, grads: &DenoiserParams) -> f64 {
        let norm = grads.squared_norm().sqrt();
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps, wd) = (self.learning_rate, self.eps, self.weight_decay);
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((_, mut p), (_, gk)), ((_, mut mk), (_, mut vk))) in
            params.tensors_mut().into_iter().zip(&g).zip(m.into_iter().zip(v))
        {
            ndarray::Zip::from(&mut p)
                .and(gk)
                .and(&mut mk)
                .and(&mut vk)
                .for_each(|w, &gr, m, v| {
                    let gr = gr * clip;
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *w -= lr * (update + wd * *w);
                });
        }
        norm
    }
}
