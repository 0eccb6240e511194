use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{pairs, DomainKey};
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Fixed reparameterization noise, one vector per domain. An entry is drawn
/// from the buffer's own seeded stream the first time its key is seen and is
/// never changed afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainNoiseBuffer {
    seed: u64,
    dim: usize,
    rng: ChaCha8Rng,
    #[serde(with = "pairs")]
    entries: BTreeMap<DomainKey, Vec<f64>>,
}

impl DomainNoiseBuffer {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            seed,
            dim,
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &DomainKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &DomainKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &DomainKey> {
        self.entries.keys()
    }

    pub fn get_or_create(&mut self, key: &DomainKey) -> &[f64] {
        if !self.entries.contains_key(key) {
            let eps: Vec<f64> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut self.rng))
                .collect();
            log::debug!("created domain noise for {key}");
            self.entries.insert(key.clone(), eps);
        }
        &self.entries[key]
    }

    /// `batch` copies of the domain's noise vector.
    pub fn batch_noise(&mut self, key: &DomainKey, batch: usize) -> Matrix {
        let eps = self.get_or_create(key).to_vec();
        let rows = vec![eps; batch];
        Matrix::from_rows(&rows).expect("equal rows")
    }
}

/// `z_D = μ_D + σ_D ⊙ ε_D`, row-wise against a single noise vector.
pub fn reparameterize_domain(mu: &Matrix, sigma: &Matrix, eps: &[f64]) -> Result<Matrix> {
    if mu.shape() != sigma.shape() || mu.cols() != eps.len() {
        return Err(Error::Shape {
            op: "reparameterize_domain",
            left: mu.shape(),
            right: (sigma.rows(), eps.len()),
        });
    }
    let mut z = mu.clone();
    for r in 0..z.rows() {
        let s = sigma.row(r);
        for ((zi, si), ei) in z.row_mut(r).iter_mut().zip(s).zip(eps) {
            *zi += si * ei;
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_reparameterization() {
        let mu = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let sigma = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let z = reparameterize_domain(&mu, &sigma, &[0.5, -0.5]).unwrap();
        assert_eq!(z.data(), &[1.5, 1.5]);
    }

    #[test]
    fn vanishing_sigma_returns_mean() {
        let mu = Matrix::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let sigma = Matrix::from_vec(1, 3, vec![1e-300; 3]).unwrap();
        let z = reparameterize_domain(&mu, &sigma, &[1.2, -0.7, 3.0]).unwrap();
        assert_eq!(z, mu);
    }

    #[test]
    fn noise_is_created_once_and_reused() {
        let mut buf = DomainNoiseBuffer::new(16, 9);
        let k = DomainKey::new("HTC", 2);
        let first = buf.get_or_create(&k).to_vec();
        buf.get_or_create(&DomainKey::new("S7", 2));
        let again = buf.get_or_create(&k).to_vec();
        assert_eq!(
            first.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(buf.len(), 2);
    }

    #[test]
    fn same_key_same_noise_for_different_moments() {
        let mut buf = DomainNoiseBuffer::new(2, 1);
        let k = DomainKey::new("BLU", 0);
        let eps = buf.get_or_create(&k).to_vec();
        let a = reparameterize_domain(
            &Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap(),
            &Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            buf.get(&k).unwrap(),
        )
        .unwrap();
        let b = reparameterize_domain(
            &Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap(),
            &Matrix::from_vec(1, 2, vec![2.0, 2.0]).unwrap(),
            buf.get(&k).unwrap(),
        )
        .unwrap();
        assert_eq!(a.data(), eps.as_slice());
        let doubled: Vec<f64> = eps.iter().map(|e| 2.0 * e).collect();
        assert_eq!(b.data(), doubled.as_slice());
    }

    #[test]
    fn json_round_trip_keeps_state_and_stream() {
        let mut buf = DomainNoiseBuffer::new(4, 77);
        buf.get_or_create(&DomainKey::new("LG", 1));
        let text = serde_json::to_string(&buf).unwrap();
        let mut back: DomainNoiseBuffer = serde_json::from_str(&text).unwrap();
        assert_eq!(back, buf);
        let k = DomainKey::new("OP3", 4);
        assert_eq!(
            back.get_or_create(&k).to_vec(),
            buf.get_or_create(&k).to_vec()
        );
    }
}
