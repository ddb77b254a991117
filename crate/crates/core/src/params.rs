//! Named parameter tensors, their gradients, and the Adam optimizer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Matrix<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// SHA-256 over names, shapes and the f64 image of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.as_slice() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_record(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| TensorRecord {
                name: n.clone(),
                rows: v.rows(),
                cols: v.cols(),
                data: v.to_f64_vec(),
            })
            .collect()
    }

    /// Overwrites values from a record; names and shapes must match exactly.
    pub fn load_record(&mut self, rec: &[TensorRecord]) -> Result<()> {
        if rec.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                rec.len()
            )));
        }
        for (i, r) in rec.iter().enumerate() {
            if r.name != self.names[i] || (r.rows, r.cols) != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} mismatch: found {} {}x{}, expected {} {:?}",
                    r.name,
                    r.rows,
                    r.cols,
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            if r.data.len() != r.rows * r.cols {
                return Err(Error::Checkpoint(format!("tensor {} has bad length", r.name)));
            }
            self.values[i] = Matrix::from_vec(r.rows, r.cols, r.data.iter().map(|&x| S::lit(x)).collect());
        }
        Ok(())
    }
}

/// Serialized tensor; values stored as f64 so both scalar widths round-trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// One gradient buffer per parameter, same shapes as the store.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Matrix<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|v| Matrix::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix<S> {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix<S>) {
        self.grads[id.0].add_assign(g);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.as_slice().iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in f64 regardless of `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let sizes: Vec<usize> = store.values.iter().map(Matrix::len).collect();
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, value) in store.values.iter_mut().enumerate() {
            let g = grads.grads[i].as_slice();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in value.as_mut_slice().iter_mut().enumerate() {
                let gk = g[k].as_f64();
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= S::lit(lr * mhat / (vhat.sqrt() + eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_any_value() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Matrix::zeros(2, 2));
        let h0 = s.content_hash();
        s.get_mut(id).set(1, 1, 1e-7);
        assert_ne!(h0, s.content_hash());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Matrix::filled(1, 1, 3.0));
        let mut opt = Adam::new(AdamConfig::default(), &s);
        for _ in 0..2000 {
            let mut g = Gradients::zeros_like(&s);
            let x = s.get(id).get(0, 0);
            g.accumulate(id, &Matrix::filled(1, 1, 2.0 * (x - 1.0)));
            opt.update(&mut s, &g, 0.01);
        }
        assert!((s.get(id).get(0, 0) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn record_round_trip_is_exact_for_f32() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.add("a", Matrix::randn(3, 4, 1.0, &mut rng));
        let rec = s.to_record();
        let json = serde_json::to_string(&rec).unwrap();
        let back: Vec<TensorRecord> = serde_json::from_str(&json).unwrap();
        let mut t = ParamStore::<f32>::new();
        t.add("a", Matrix::zeros(3, 4));
        t.load_record(&back).unwrap();
        assert_eq!(s, t);
    }
}
