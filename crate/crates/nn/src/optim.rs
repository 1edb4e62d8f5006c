use crate::graph::{Grads, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store
/// they were first stepped with.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        if self.moments.len() < ps.len() {
            self.moments.resize_with(ps.len(), || None);
        }
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            if ps.get(id).kind != ParamKind::Trainable {
                continue;
            }
            let Some(g) = grads.get(ps, id) else { continue };
            let value = ps.value_mut(id);
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *p -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
