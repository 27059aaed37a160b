use super::{ParamId, ParamStore};
use crate::error::{KsttError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with bias correction. Moment estimates and the step counter are kept
/// per parameter, so a parameter that sits out a phase keeps its own schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: Vec::new(),
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.state
            .get(id.index())
            .and_then(|s| s.as_ref())
            .map_or(0, |s| s.step)
    }

    /// Applies one update to each listed parameter and clears its gradient.
    /// Fails without touching anything if a listed parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if let Some(&missing) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(KsttError::Contract(format!(
                "parameter {:?} has no gradient",
                store.name(missing)
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for &id in ids {
            let t = store.get_mut(id);
            let grad = t.grad.take().expect("checked above");
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * g;
                st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * g * g;
                let m_hat = st.m[j] / bc1;
                let v_hat = st.v[j] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales the listed gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: f64) -> f64 {
    let total: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for &id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    total
}
