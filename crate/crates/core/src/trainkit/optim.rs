//! AdamW with decoupled weight decay over flattened parameter vectors.
//!
//! The model exposes its parameters through slot visitation in a canonical
//! order; [`flatten_params`] copies them and their weight-decay flags into
//! one flat vector, the optimizer updates that vector, and [`write_params`]
//! copies the result back. Moments are plain `Vec<f64>`s, which keeps
//! checkpointing a matter of two extra arrays.

use crate::error::{Error, Result};
use crate::model::PretrainModel;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A model's parameters copied into one flat vector, with the matching
/// per-slot weight-decay mask.
#[derive(Debug, Clone)]
pub struct ParamFlat {
    pub values: Vec<f64>,
    pub decay: Vec<bool>,
}

/// Copies every parameter slot into a flat vector, in visitation order.
pub fn flatten_params(model: &mut PretrainModel) -> ParamFlat {
    let mut values = Vec::new();
    let mut decay = Vec::new();
    model.visit_params(&mut |_, slice, d| {
        values.extend_from_slice(slice);
        decay.extend(std::iter::repeat(d).take(slice.len()));
    });
    ParamFlat { values, decay }
}

/// Copies a flat vector produced by [`flatten_params`] back into the model.
pub fn write_params(model: &mut PretrainModel, flat: &[f64]) -> Result<()> {
    let expected = model.n_params();
    if flat.len() != expected {
        return Err(Error::Contract(format!(
            "flat parameter vector holds {} values but the model exposes {expected}",
            flat.len()
        )));
    }
    let mut offset = 0usize;
    model.visit_params(&mut |_, slice, _| {
        slice.copy_from_slice(&flat[offset..offset + slice.len()]);
        offset += slice.len();
    });
    Ok(())
}

/// Copies a gradient container's slots into one flat vector, in the same
/// order as [`flatten_params`].
pub fn flatten_grads(grad: &mut PretrainModel) -> Vec<f64> {
    let mut values = Vec::new();
    grad.visit_params(&mut |_, slice, _| values.extend_from_slice(slice));
    values
}

/// Scales the gradient in place so its global L2 norm is at most
/// `max_norm`, and returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Adam with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`,
/// with the decay term skipped on slots whose mask is false.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Completed update steps; drives bias correction.
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Rebuilds the optimizer from checkpointed moment buffers.
    pub fn from_state(weight_decay: f64, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Contract(format!(
                "moment buffers disagree in length: {} vs {}",
                m.len(),
                v.len()
            )));
        }
        Ok(AdamW {
            weight_decay,
            step,
            m,
            v,
        })
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn update(
        &mut self,
        lr: f64,
        params: &mut [f64],
        grads: &[f64],
        decay: &[bool],
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || decay.len() != n {
            return Err(Error::Contract(format!(
                "optimizer tracks {n} slots, got {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            params[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * params[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::tiny_model_config;
    use super::super::schedule::learning_rate;
    use super::*;

    /// Independent scalar AdamW that tracks bias corrections as running
    /// products instead of powers.
    struct Reference {
        m: [f64; 2],
        v: [f64; 2],
        b1t: f64,
        b2t: f64,
    }

    impl Reference {
        fn new() -> Self {
            Reference {
                m: [0.0; 2],
                v: [0.0; 2],
                b1t: 1.0,
                b2t: 1.0,
            }
        }

        fn step(&mut self, lr: f64, wd: f64, p: &mut [f64; 2], g: [f64; 2], decay: [bool; 2]) {
            self.b1t *= ADAM_BETA1;
            self.b2t *= ADAM_BETA2;
            for i in 0..2 {
                self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g[i];
                self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = self.m[i] / (1.0 - self.b1t);
                let v_hat = self.v[i] / (1.0 - self.b2t);
                let wd_i = if decay[i] { wd } else { 0.0 };
                p[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd_i * p[i]);
            }
        }
    }

    #[test]
    fn matches_hand_reference_over_hundred_steps() {
        let wd = 5e-2;
        let mut opt = AdamW::new(2, wd);
        let mut params = vec![0.5, -0.3];
        let decay = vec![true, false];

        let mut reference = Reference::new();
        let mut ref_params = [0.5, -0.3];

        for t in 0..100u64 {
            let g0 = (0.1 * t as f64 + 0.3).sin();
            let g1 = (0.2 * t as f64).cos() - 0.1;
            let lr = learning_rate(1e-2, t, 5, 100);
            opt.update(lr, &mut params, &[g0, g1], &decay).unwrap();
            reference.step(lr, wd, &mut ref_params, [g0, g1], [true, false]);
            for i in 0..2 {
                let denom = ref_params[i].abs().max(1.0);
                assert!(
                    (params[i] - ref_params[i]).abs() / denom < 1e-7,
                    "slot {i} diverged at step {t}: {} vs {}",
                    params[i],
                    ref_params[i]
                );
            }
        }
        assert_eq!(opt.step, 100);
    }

    #[test]
    fn decay_applies_only_to_flagged_slots() {
        let lr = 0.1;
        let wd = 0.5;
        let mut opt = AdamW::new(2, wd);
        let mut params = vec![1.0, 1.0];
        let mut expected = 1.0f64;
        for _ in 0..10 {
            opt.update(lr, &mut params, &[0.0, 0.0], &[true, false]).unwrap();
            expected -= lr * (wd * expected);
        }
        assert_eq!(params[0], expected);
        assert_eq!(params[1], 1.0);
    }

    #[test]
    fn update_rejects_mismatched_lengths() {
        let mut opt = AdamW::new(2, 0.0);
        let mut params = vec![0.0; 3];
        let result = opt.update(0.1, &mut params, &[0.0; 3], &[false; 3]);
        assert!(matches!(result, Err(Error::Contract(_))));
    }

    #[test]
    fn from_state_rejects_unequal_buffers() {
        assert!(matches!(
            AdamW::from_state(0.0, 1, vec![0.0; 2], vec![0.0; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut grads = vec![3.0, 4.0];
        let norm = clip_grad_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads, vec![3.0, 4.0]);

        let norm = clip_grad_norm(&mut grads, 2.5);
        assert_eq!(norm, 5.0);
        let clipped = (grads[0] * grads[0] + grads[1] * grads[1]).sqrt();
        assert!((clipped - 2.5).abs() < 1e-12);
        assert!((grads[0] / grads[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn flatten_and_write_round_trip() {
        let mut model = PretrainModel::new(&tiny_model_config(), 3).unwrap();
        let flat = flatten_params(&mut model);
        assert_eq!(flat.values.len(), model.n_params());
        assert_eq!(flat.decay.len(), flat.values.len());
        assert!(flat.decay.iter().any(|&d| d));
        assert!(flat.decay.iter().any(|&d| !d));

        let mut nudged = flat.values.clone();
        for v in nudged.iter_mut() {
            *v += 1.0;
        }
        write_params(&mut model, &nudged).unwrap();
        let roundtrip = flatten_params(&mut model);
        assert_eq!(roundtrip.values, nudged);

        assert!(matches!(
            write_params(&mut model, &nudged[1..]),
            Err(Error::Contract(_))
        ));
    }
}
