use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    labels: Vec<String>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// One accumulator pair per `(label, len)` block.
    pub fn new<S: Into<String>>(
        config: AdamConfig,
        blocks: impl IntoIterator<Item = (S, usize)>,
    ) -> Self {
        let (labels, sizes): (Vec<String>, Vec<usize>) =
            blocks.into_iter().map(|(l, n)| (l.into(), n)).unzip();
        Self {
            config,
            step: 0,
            labels,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Applies one bias-corrected Adam update. Nothing is modified if any
    /// gradient is non-finite or a block shape disagrees.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: (params.len(), grads.len()),
                right: (self.first.len(), self.first.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: (p.len(), g.len()),
                    right: (self.first[i].len(), 1),
                });
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    block: self.labels[i].clone(),
                    reason: format!("non-finite gradient at index {j}"),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(lr: f64) -> AdamState {
        AdamState::new(
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            [("p", 1)],
        )
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(AdamConfig::default(), [("w", 3), ("b", 2)]);
        let mut w = vec![0.5, -1.0, 2.0];
        let mut b = vec![0.1, 0.2];
        let (w0, b0) = (w.clone(), b.clone());
        st.step(&mut [&mut w, &mut b], &[&[0.0; 3], &[0.0; 2]])
            .unwrap();
        assert_eq!(w, w0);
        assert_eq!(b, b0);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² on step one, so the move is lr·g/(|g| + eps).
        for g in [1e-3, 0.37, -4.0, 250.0] {
            let mut st = single(1e-3);
            let mut p = vec![1.0];
            st.step(&mut [&mut p], &[&[g]]).unwrap();
            let expected = 1e-3 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - p[0]).abs() - expected).abs() < 1e-15, "g={g}");
            assert_eq!((1.0 - p[0]).signum(), g.signum());
        }
    }

    #[test]
    fn repeated_calls_are_not_idempotent() {
        let mut st = single(1e-2);
        let mut p = vec![0.0];
        st.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let after_one = p[0];
        st.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert_ne!(p[0], after_one);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_names_block_and_changes_nothing() {
        let mut st = AdamState::new(AdamConfig::default(), [("enc.w", 2), ("enc.b", 1)]);
        let mut w = vec![1.0, 2.0];
        let mut b = vec![3.0];
        let err = st
            .step(&mut [&mut w, &mut b], &[&[0.1, 0.1], &[f64::NAN]])
            .unwrap_err();
        assert!(err.to_string().contains("enc.b"), "{err}");
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(st.step_count(), 0);
    }
}
