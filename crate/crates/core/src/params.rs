//! Named parameter storage, learning-rate groups and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::matrix::Matrix;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared encoder, including the token embedding table.
    Encoder,
    /// Fused answer-generation decoder.
    AnswerDecoder,
    /// Training-only entailment decoder.
    EntailmentDecoder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, p)| p.name == name).map(|(id, _)| id)
    }

    /// Same layout, values converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: Matrix::from_vec(
                        p.value.rows(),
                        p.value.cols(),
                        p.value.data().iter().map(|&x| lit::<U>(x.to_f64_lossy())).collect(),
                    ),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Max global gradient norm; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

/// AdamW with decoupled weight decay and one learning rate per [`ParamGroup`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW<T> {
    config: AdamWConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `lr_for` maps each group to its learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr_for: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let c = self.config;
        let mut clip = 1.0;
        if c.clip_norm > 0.0 {
            let norm = grads.grads.iter().map(|g| g.sq_norm().to_f64_lossy()).sum::<f64>().sqrt();
            if norm > c.clip_norm {
                clip = c.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let (one_b1, one_b2) = (lit::<T>(1.0 - c.beta1), lit::<T>(1.0 - c.beta2));
        let clip = lit::<T>(clip);
        let eps = lit::<T>(c.eps);
        for (i, p) in store.params.iter_mut().enumerate() {
            let lr = lr_for(p.group);
            let step_size = lit::<T>(lr / bc1);
            let bc2_sqrt = lit::<T>(bc2.sqrt());
            let decay = lit::<T>(1.0 - lr * c.weight_decay);
            let g = grads.grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                *w = *w * decay - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_moves_against_gradient_with_group_learning_rates() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::Encoder, Matrix::filled(1, 1, 1.0));
        let b = store.add("b", ParamGroup::EntailmentDecoder, Matrix::filled(1, 1, 1.0));
        let mut grads = ParamGrads::zeros_like(&store);
        grads.grads[0].fill(0.5);
        grads.grads[1].fill(0.5);
        let cfg = AdamWConfig { weight_decay: 0.0, clip_norm: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, &grads, |g| if g == ParamGroup::EntailmentDecoder { 2e-5 } else { 2e-4 });
        // first Adam step moves each weight by ~lr
        assert!((store.get(a).value[(0, 0)] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((store.get(b).value[(0, 0)] - (1.0 - 2e-5)).abs() < 1e-9);
    }

    #[test]
    fn every_parameter_has_exactly_one_group() {
        let mut store = ParamStore::<f32>::new();
        store.add("e", ParamGroup::Encoder, Matrix::zeros(1, 1));
        store.add("a", ParamGroup::AnswerDecoder, Matrix::zeros(1, 1));
        store.add("d", ParamGroup::EntailmentDecoder, Matrix::zeros(1, 1));
        let total: usize = [ParamGroup::Encoder, ParamGroup::AnswerDecoder, ParamGroup::EntailmentDecoder]
            .iter()
            .map(|&g| store.ids_in(g).len())
            .sum();
        assert_eq!(total, store.len());
    }
}
