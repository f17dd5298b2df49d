//! Logistic regression and factorization machine baselines over the same
//! hashed presence features (`x_i = 1` per occurrence).

use rand::Rng;

use super::embedding::SparseTable;
use super::{ModelError, Scorer};
use crate::features::Instance;
use crate::tensor::{logistic_loss, logistic_loss_logit_grad, sigmoid, ParamBlock, Real};

fn check_range(idx: usize, n: usize) -> Result<(), ModelError> {
    if idx >= n {
        Err(ModelError::IndexOutOfRange {
            index: idx,
            hash_space: n,
        })
    } else {
        Ok(())
    }
}

/// `σ(w0 + Σ w_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrModel<T: Real = f32> {
    pub bias: ParamBlock<T>,
    pub weights: SparseTable<T>,
}

impl<T: Real> LrModel<T> {
    pub fn zeros(hash_space: usize) -> Self {
        Self {
            bias: ParamBlock::zeros(1, 1),
            weights: SparseTable::zeros(hash_space, 1),
        }
    }

    fn logit(&self, instance: &Instance) -> Result<f64, ModelError> {
        let mut z = self.bias.value.get(0, 0).to_wide();
        for idx in instance.active_indices() {
            check_range(idx, self.weights.rows())?;
            z += self.weights.row(idx)[0].to_wide();
        }
        Ok(z)
    }

    pub fn predict(&self, instance: &Instance) -> Result<f64, ModelError> {
        Ok(sigmoid(self.logit(instance)?))
    }

    /// Mean logistic loss of the batch; gradients accumulate.
    pub fn accumulate_batch(&mut self, batch: &[Instance]) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let mut total = 0.0;
        for inst in batch {
            let p = sigmoid(self.logit(inst)?);
            let y = inst.label_f64();
            total += logistic_loss(p, y);
            let d = T::from_wide(logistic_loss_logit_grad(p, y) / n);
            self.bias.grad.values_mut()[0] += d;
            for idx in inst.active_indices() {
                self.weights.add_row_grad(idx, &[d]);
            }
        }
        Ok(total / n)
    }

    pub fn adagrad(&mut self, lr: f64, eps: f64) -> Result<(), ModelError> {
        crate::tensor::adagrad_update(&mut self.bias, lr, eps)?;
        self.weights.adagrad(lr, eps)?;
        Ok(())
    }
}

impl<T: Real> Scorer for LrModel<T> {
    fn score(&self, instance: &Instance) -> Result<f64, ModelError> {
        self.predict(instance)
    }
}

/// `σ(w0 + Σ w_i + Σ_{p<q} v_p · v_q)` over feature occurrences.
#[derive(Debug, Clone, PartialEq)]
pub struct FmModel<T: Real = f32> {
    pub linear: LrModel<T>,
    pub factors: SparseTable<T>,
}

impl<T: Real> FmModel<T> {
    pub fn zeros(hash_space: usize, dim: usize) -> Self {
        Self {
            linear: LrModel::zeros(hash_space),
            factors: SparseTable::zeros(hash_space, dim),
        }
    }

    /// Factors uniform on `[-scale, scale]`, linear part zero.
    pub fn init<R: Rng + ?Sized>(hash_space: usize, dim: usize, rng: &mut R, scale: f64) -> Self {
        let mut m = Self::zeros(hash_space, dim);
        m.factors.init_uniform(rng, scale);
        m
    }

    /// Per-factor sums `S_f = Σ_p v_{p,f}` and the interaction term
    /// `½ Σ_f (S_f² - Σ_p v_{p,f}²)`.
    fn interaction(&self, instance: &Instance) -> Result<(Vec<f64>, f64), ModelError> {
        let k = self.factors.dim();
        let mut sum = vec![0.0f64; k];
        let mut sum_sq = vec![0.0f64; k];
        for idx in instance.active_indices() {
            check_range(idx, self.factors.rows())?;
            for ((s, q), v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(self.factors.row(idx)) {
                let v = v.to_wide();
                *s += v;
                *q += v * v;
            }
        }
        let pairwise = sum.iter().zip(&sum_sq).map(|(s, q)| s * s - q).sum::<f64>() * 0.5;
        Ok((sum, pairwise))
    }

    /// Second-order term alone, via the sum-of-squares rearrangement.
    pub fn interaction_term(&self, instance: &Instance) -> Result<f64, ModelError> {
        Ok(self.interaction(instance)?.1)
    }

    pub fn predict(&self, instance: &Instance) -> Result<f64, ModelError> {
        let (_, pairwise) = self.interaction(instance)?;
        Ok(sigmoid(self.linear.logit(instance)? + pairwise))
    }

    pub fn accumulate_batch(&mut self, batch: &[Instance]) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n = batch.len() as f64;
        let k = self.factors.dim();
        let mut total = 0.0;
        let mut grad = vec![T::zero(); k];
        for inst in batch {
            let (sum, pairwise) = self.interaction(inst)?;
            let p = sigmoid(self.linear.logit(inst)? + pairwise);
            let y = inst.label_f64();
            total += logistic_loss(p, y);
            let d = logistic_loss_logit_grad(p, y) / n;
            let dt = T::from_wide(d);
            self.linear.bias.grad.values_mut()[0] += dt;
            for idx in inst.active_indices() {
                self.linear.weights.add_row_grad(idx, &[dt]);
                // ∂/∂v_{p,f} of the interaction is S_f - v_{p,f}
                for ((g, s), v) in grad.iter_mut().zip(&sum).zip(self.factors.row(idx)) {
                    *g = T::from_wide(d * (s - v.to_wide()));
                }
                self.factors.add_row_grad(idx, &grad);
            }
        }
        Ok(total / n)
    }

    pub fn adagrad(&mut self, lr: f64, eps: f64) -> Result<(), ModelError> {
        self.linear.adagrad(lr, eps)?;
        self.factors.adagrad(lr, eps)?;
        Ok(())
    }
}

impl<T: Real> Scorer for FmModel<T> {
    fn score(&self, instance: &Instance) -> Result<f64, ModelError> {
        self.predict(instance)
    }
}
