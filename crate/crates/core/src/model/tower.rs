use rand::Rng;

use crate::tensor::{dropout, Activation, DropoutMask, FcCache, FcLayer, Mode, Real, TensorError};

/// A chain of fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower<T: Real = f32> {
    pub layers: Vec<FcLayer<T>>,
    input_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TowerCache<T: Real> {
    layers: Vec<FcCache<T>>,
    masks: Vec<Option<DropoutMask>>,
}

impl<T: Real> Tower<T> {
    /// ReLU hidden layers, optionally followed by a projection with its own
    /// activation.
    pub fn new(input_dim: usize, hidden: &[usize], projection: Option<(usize, Activation)>) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(FcLayer::zeros(prev, h, Activation::Relu));
            prev = h;
        }
        if let Some((dim, act)) = projection {
            layers.push(FcLayer::zeros(prev, dim, act));
        }
        Self { layers, input_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, FcLayer::output_dim)
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, TensorError> {
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Cached forward pass. With `dropout` set, inverted dropout follows
    /// every layer.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        input: &[T],
        mut dropout_cfg: Option<(f64, &mut R)>,
    ) -> Result<(Vec<T>, TowerCache<T>), TensorError> {
        let mut cache = TowerCache {
            layers: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.to_vec();
        for layer in &self.layers {
            let (y, c) = layer.forward_cached(&x)?;
            cache.layers.push(c);
            x = match dropout_cfg.as_mut() {
                Some((ratio, rng)) => {
                    let (out, mask) = dropout(&y, *ratio, &mut **rng, Mode::Train)?;
                    cache.masks.push(Some(mask));
                    out
                }
                None => {
                    cache.masks.push(None);
                    y
                }
            };
        }
        Ok((x, cache))
    }

    pub fn backward(&mut self, cache: &TowerCache<T>, upstream: &[T]) -> Result<Vec<T>, TensorError> {
        if cache.layers.len() != self.layers.len() {
            return Err(TensorError::MissingCache);
        }
        let mut g = upstream.to_vec();
        for ((layer, c), mask) in self
            .layers
            .iter_mut()
            .zip(&cache.layers)
            .zip(&cache.masks)
            .rev()
        {
            if let Some(mask) = mask {
                g = mask.backward(&g);
            }
            g = layer.backward(Some(c), &g)?;
        }
        Ok(g)
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for layer in &mut self.layers {
            layer.weight.init_uniform(rng, scale);
        }
    }

    /// Each weight uniform on `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            layer.init_glorot(rng);
        }
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(FcLayer::zero_grad);
    }

    pub fn adagrad(&mut self, lr: f64, eps: f64) -> Result<(), TensorError> {
        self.layers.iter_mut().try_for_each(|l| l.adagrad(lr, eps))
    }

    pub fn cast<U: Real>(&self) -> Tower<U> {
        Tower {
            layers: self.layers.iter().map(FcLayer::cast).collect(),
            input_dim: self.input_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dims_chain() {
        let t = Tower::<f32>::new(6, &[5, 4], Some((3, Activation::Tanh)));
        assert_eq!(t.layers.len(), 3);
        assert_eq!(t.output_dim(), 3);
        assert_eq!(t.layers[1].input_dim(), 5);
        assert_eq!(t.layers[2].activation, Activation::Tanh);
        let empty = Tower::<f32>::new(6, &[], None);
        assert_eq!(empty.output_dim(), 6);
        assert_eq!(empty.forward(&[1.0; 6]).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_matches_finite_differences_with_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tower = Tower::<f64>::new(4, &[5, 3], Some((2, Activation::Tanh)));
        tower.init_uniform(&mut rng, 0.8);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up = [0.7, -0.4];
        let f = |t: &Tower<f64>, x: &[f64]| {
            let (y, _) = t
                .forward_train(x, Some((0.3, &mut ChaCha8Rng::seed_from_u64(99))))
                .unwrap();
            dot(&y, &up)
        };
        let (_, cache) = tower
            .forward_train(&x, Some((0.3, &mut ChaCha8Rng::seed_from_u64(99))))
            .unwrap();
        let gx = tower.backward(&cache, &up).unwrap();
        let h = 1e-3;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&tower, &xp) - f(&tower, &xm)) / (2.0 * h);
            let rel = (gx[i] - fd).abs() / gx[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "{i}: {} vs {fd}", gx[i]);
        }
    }
}
