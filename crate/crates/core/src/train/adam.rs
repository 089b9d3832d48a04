use super::TrainConfig;
use crate::model::ParamStore;

/// First and second moments per parameter entry, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn step(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction. Weight decay is decoupled: each
/// parameter first shrinks by `lr·wd·θ`. `grads` are zeroed afterwards.
pub fn adam_step(params: &mut ParamStore, grads: &mut [Vec<f64>], state: &mut AdamState, tc: &TrainConfig, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - tc.beta1.powi(t);
    let bc2 = 1.0 - tc.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &mut grads[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            if tc.weight_decay != 0.0 {
                *theta -= lr * tc.weight_decay * *theta;
            }
            m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g[j];
            v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + tc.adam_eps);
        }
        g.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = max / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    norm
}
