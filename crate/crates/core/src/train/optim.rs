//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Cosine multiplier `0.5 (1 + cos(pi step / total))`, clamped to `[0, 1]`.
pub fn cosine_multiplier(step: u64, total: u64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let x = step.min(total) as f64 / total as f64;
    0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub hyper: AdamParams,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n: usize, hyper: AdamParams) -> Self {
        AdamW { hyper, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// One update with learning rate `lr` (schedule already applied).
    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (c1, c2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let decay = T::of(1.0 - lr * weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *p *= decay;
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + 2 * self.m.len() * T::BYTES);
        buf.extend_from_slice(OPT_MAGIC);
        buf.push(T::BYTES as u8);
        buf.extend_from_slice(&self.t.to_le_bytes());
        buf.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for h in [self.hyper.beta1, self.hyper.beta2, self.hyper.eps] {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        self.m.iter().chain(&self.v).for_each(|x| x.write_le(&mut buf));
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::OptimizerState(m.to_string());
        let header = 8 + 1 + 8 + 8 + 24;
        if bytes.len() < header || &bytes[..8] != OPT_MAGIC {
            return Err(bad("not an optimizer state file"));
        }
        let width = bytes[8] as usize;
        if width != T::BYTES {
            return Err(bad("parameter width differs from the run precision"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let t = u64_at(9);
        let n = u64_at(17) as usize;
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let hyper = AdamParams { beta1: f(25), beta2: f(33), eps: f(41) };
        if bytes.len() != header + 2 * n * width {
            return Err(bad("truncated or oversized file"));
        }
        let vals: Vec<T> = bytes[header..].chunks_exact(width).map(T::read_le).collect();
        let (m, v) = vals.split_at(n);
        Ok(AdamW { hyper, m: m.to_vec(), v: v.to_vec(), t })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

const OPT_MAGIC: &[u8; 8] = b"RSTAOPT1";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        assert_eq!(cosine_multiplier(0, 100), 1.0);
        assert!(cosine_multiplier(100, 100).abs() < 1e-15);
        assert!((cosine_multiplier(50, 100) - 0.5).abs() < 1e-15);
        let m: Vec<f64> = (0..=100).map(|s| cosine_multiplier(s, 100)).collect();
        assert!(m.windows(2).all(|w| w[1] <= w[0]));
        assert!(m[..100].iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn state_round_trip() {
        let mut opt = AdamW::<f64>::new(3, AdamParams::default());
        let mut p = vec![1.0, -2.0, 0.5];
        opt.update(&mut p, &[0.1, 0.2, -0.3], 1e-2, 0.01);
        let back = AdamW::<f64>::from_bytes(&opt.to_bytes()).unwrap();
        assert_eq!(back, opt);
        assert!(AdamW::<f32>::from_bytes(&opt.to_bytes()).is_err());
        assert!(AdamW::<f64>::from_bytes(&opt.to_bytes()[..40]).is_err());
    }
}
