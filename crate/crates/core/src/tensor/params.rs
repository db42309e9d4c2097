use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Vec<f32>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors plus Adam moment buffers.
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
    adam_m: BTreeMap<String, Vec<f32>>,
    adam_v: BTreeMap<String, Vec<f32>>,
    step_count: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let len = tensor.len();
        self.adam_m.insert(name.clone(), vec![0.0; len]);
        self.adam_v.insert(name.clone(), vec![0.0; len]);
        self.entries.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.adam_m.get(name)?, self.adam_v.get(name)?))
    }

    /// One bias-corrected Adam update over every parameter.
    ///
    /// `grads` must contain an entry of matching length for each parameter;
    /// nothing is modified if any is missing.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) -> Result<(), TensorError> {
        for (name, tensor) in &self.entries {
            match grads.get(name) {
                None => return Err(TensorError::MissingGradient(name.clone())),
                Some(g) if g.len() != tensor.len() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        left: tensor.shape().to_vec(),
                        right: vec![g.len()],
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = grads.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(TensorError::UnknownParameter(extra.clone()));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, tensor) in self.entries.iter_mut() {
            let g = &grads[name];
            let m = self.adam_m.get_mut(name).expect("moments mirror entries");
            let v = self.adam_v.get_mut(name).expect("moments mirror entries");
            for (i, theta) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *theta = (*theta as f64 - cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap()).unwrap();
        s.insert("b", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let grads: ParamGrads = [("w".to_string(), vec![0.0, 0.0]), ("b".to_string(), vec![0.0])].into();
        s.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w"), before.get("w"));
        assert_eq!(s.get("b"), before.get("b"));
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store();
        let lr = 1e-3;
        let grads: ParamGrads = [("w".to_string(), vec![3.0, -0.02]), ("b".to_string(), vec![7.5])].into();
        s.adam_step(&grads, &AdamConfig::with_lr(lr)).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let w = s.get("w").unwrap().data();
        assert!((w[0] - (0.5 - lr)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + lr)).abs() < 1e-6);
        assert!((s.get("b").unwrap().item() - (2.0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let grads: ParamGrads = [("w".to_string(), vec![0.3, 0.1]), ("b".to_string(), vec![-0.7])].into();
        let mut a = store();
        let mut b = store();
        for _ in 0..3 {
            a.adam_step(&grads, &AdamConfig::default()).unwrap();
            b.adam_step(&grads, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store();
        let grads: ParamGrads = [("w".to_string(), vec![0.0, 0.0])].into();
        assert_eq!(
            s.adam_step(&grads, &AdamConfig::default()).unwrap_err(),
            TensorError::MissingGradient("b".into())
        );
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn moments_mirror_shapes() {
        let s = store();
        for (name, t) in s.iter() {
            let (m, v) = s.moments(name).unwrap();
            assert_eq!(m.len(), t.len());
            assert_eq!(v.len(), t.len());
        }
    }
}
