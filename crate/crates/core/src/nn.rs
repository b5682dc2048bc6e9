//! Named parameter storage, initialisation helpers and optimizers.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{param_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable tensors keyed by dotted names, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Binds a stored tensor as a graph leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }
}

/// Normal weights with variance `gain^2 / fan_in`.
pub fn scaled_normal<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let std = gain / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `v = momentum * v + g; p -= lr * v`.
    Sgd { momentum: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Optimizer with per-parameter state. Parameters are updated in name
/// order, so an update is deterministic regardless of how gradients were
/// produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &HashMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(param_err(format!("learning rate {lr} must be finite and >= 0")));
        }
        self.step += 1;
        let lr_t = T::from_f64_lossy(lr);
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            p.check_same_shape(g)?;
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::from_f64_lossy(momentum);
                    let v = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = mu * *vv + gv;
                        *pv -= lr_t * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                    let c1 = T::from_f64_lossy(1.0 - beta1.powi(self.step as i32));
                    let c2 = T::from_f64_lossy(1.0 - beta2.powi(self.step as i32));
                    let e = T::from_f64_lossy(eps);
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for (((pv, mv), vv), &gv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr_t * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }

    /// State as named tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "optim.step".to_string(),
            Tensor::new(&[2], split_u64(self.step)).expect("two words"),
        )];
        out.extend(self.first.iter().map(|(k, v)| (format!("optim.m.{k}"), v.clone())));
        out.extend(self.second.iter().map(|(k, v)| (format!("optim.v.{k}"), v.clone())));
        out
    }

    /// Inverse of [`Optimizer::state_tensors`]; unrelated names are ignored.
    pub fn from_state_tensors<'n>(
        kind: OptimizerKind,
        tensors: impl IntoIterator<Item = (&'n str, &'n Tensor<T>)>,
    ) -> Result<Self> {
        let mut opt = Self::new(kind);
        let mut saw_step = false;
        for (name, t) in tensors {
            if name == "optim.step" {
                opt.step = join_u64(t.data())?;
                saw_step = true;
            } else if let Some(rest) = name.strip_prefix("optim.m.") {
                opt.first.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("optim.v.") {
                opt.second.insert(rest.to_string(), t.clone());
            }
        }
        if !saw_step {
            return Err(Error::MissingTensor("optim.step".into()));
        }
        Ok(opt)
    }
}

// Step counts are clamped to 32 bits and stored as two 16-bit halves, each
// exact in f32.
fn split_u64<T: Scalar>(v: u64) -> Vec<T> {
    let v = v.min(u32::MAX as u64);
    vec![
        T::from_f64_lossy((v >> 16) as f64),
        T::from_f64_lossy((v & 0xFFFF) as f64),
    ]
}

fn join_u64<T: Scalar>(d: &[T]) -> Result<u64> {
    if d.len() != 2 {
        return Err(Error::Checkpoint("optimizer step tensor must have 2 entries".into()));
    }
    let hi = d[0].to_f64_lossy();
    let lo = d[1].to_f64_lossy();
    if hi < 0.0 || lo < 0.0 || hi.fract() != 0.0 || lo.fract() != 0.0 || lo >= 65536.0 {
        return Err(Error::Checkpoint("corrupt optimizer step".into()));
    }
    Ok(((hi as u64) << 16) | lo as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        p.insert("b", Tensor::new(&[1], vec![0.5]).unwrap());
        p
    }

    fn grads() -> HashMap<String, Tensor<f32>> {
        let mut g = HashMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![0.1, 0.2]).unwrap());
        g.insert("b".to_string(), Tensor::new(&[1], vec![-1.0]).unwrap());
        g
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        for kind in [OptimizerKind::adam(), OptimizerKind::sgd_momentum()] {
            let mut p = store();
            let mut opt = Optimizer::new(kind);
            opt.apply(&mut p, &grads(), 0.0).unwrap();
            assert_eq!(p, store());
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = store();
        let mut opt = Optimizer::new(OptimizerKind::sgd_momentum());
        opt.apply(&mut p, &grads(), 0.1).unwrap();
        opt.apply(&mut p, &grads(), 0.1).unwrap();
        // v1 = g, v2 = 1.9 g; total step 2.9 g * lr
        let b = p.get("b").unwrap().data()[0];
        assert!((b - (0.5 + 0.29)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = store();
        let mut opt = Optimizer::new(OptimizerKind::adam());
        opt.apply(&mut p, &grads(), 0.01).unwrap();
        let a = p.get("a").unwrap().data();
        assert!((a[0] - 0.99).abs() < 1e-5 && (a[1] + 2.01).abs() < 1e-5);
    }

    #[test]
    fn state_round_trips() {
        let mut p = store();
        let mut opt = Optimizer::new(OptimizerKind::adam());
        for _ in 0..3 {
            opt.apply(&mut p, &grads(), 0.01).unwrap();
        }
        let state = opt.state_tensors();
        let back = Optimizer::from_state_tensors(
            OptimizerKind::adam(),
            state.iter().map(|(k, v)| (k.as_str(), v)),
        )
        .unwrap();
        assert_eq!(back, opt);
        assert_eq!(join_u64::<f32>(&split_u64::<f32>(123_456_789)).unwrap(), 123_456_789);
    }
}
