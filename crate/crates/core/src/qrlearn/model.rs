//! Shared-trunk embedding MLP with a quantile head and a termination head.
//!
//! Parameters are stored as `f32` tensors (the on-disk precision) and all
//! arithmetic runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qrlearn::loss::sigmoid;
use crate::simenv::FeatureMap;

/// Architecture of an [`EngagementModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub features: FeatureMap,
    pub n_actions: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Width of the value head; 1 for the scalar regression variant.
    pub n_quantiles: usize,
    pub termination_head: bool,
    /// Adds one embedding field for the pair (first state feature, action).
    #[serde(default)]
    pub cross_features: bool,
}

impl ModelSpec {
    /// Vocabulary of every embedding field: state fields, the action, then
    /// the optional cross field.
    pub fn field_vocabs(&self) -> Vec<usize> {
        let mut v = self.features.field_vocabs();
        let first = v[0];
        v.push(self.n_actions);
        if self.cross_features {
            v.push(first * self.n_actions);
        }
        v
    }

    pub fn input_dim(&self) -> usize {
        self.field_vocabs().len() * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_quantiles == 0 || self.n_actions == 0 {
            return Err(Error::validation("embed_dim, n_quantiles and n_actions must be >= 1"));
        }
        if self.field_vocabs().contains(&0) || self.hidden.contains(&0) {
            return Err(Error::validation("vocabularies and hidden widths must be >= 1"));
        }
        Ok(())
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, vocab) in self.field_vocabs().into_iter().enumerate() {
            out.push((format!("embedding.{i}"), vec![vocab, self.embed_dim]));
        }
        let mut width = self.input_dim();
        for (l, &h) in self.hidden.iter().enumerate() {
            out.push((format!("trunk.{l}.weight"), vec![h, width]));
            out.push((format!("trunk.{l}.bias"), vec![h]));
            width = h;
        }
        out.push(("quantile_head.weight".into(), vec![self.n_quantiles, width]));
        out.push(("quantile_head.bias".into(), vec![self.n_quantiles]));
        if self.termination_head {
            out.push(("termination_head.weight".into(), vec![1, width]));
            out.push(("termination_head.bias".into(), vec![1]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Fan-in scaled uniform trunk and embeddings, zero output heads: the
    /// untrained model predicts quantiles 0 and termination 0.5.
    Standard,
    /// Every tensor random, including heads and biases. Used for gradient checks.
    FullyRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngagementModel {
    spec: ModelSpec,
    tensors: Vec<Tensor>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Activations {
    ids: Vec<usize>,
    /// `layers[0]` is the embedding concat, `layers[l]` the output of trunk layer `l`.
    layers: Vec<Vec<f64>>,
    /// Pre-activations of the trunk layers.
    pre: Vec<Vec<f64>>,
    pub quantiles: Vec<f64>,
    pub logit: Option<f64>,
}

impl Activations {
    /// Smallest `|z|` over trunk pre-activations; distance to a ReLU kink.
    pub fn relu_margin(&self) -> f64 {
        self.pre.iter().flatten().fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Gradient buffers laid out like the model's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn uniform(rng: &mut ChaCha8Rng, bound: f64, n: usize) -> Vec<f32> {
    (0..n).map(|_| ((2.0 * rng.random::<f64>() - 1.0) * bound) as f32).collect()
}

impl EngagementModel {
    pub fn new(spec: ModelSpec, init: Init, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_fields = spec.field_vocabs().len();
        let tensors = spec
            .tensor_layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                let is_head = name.starts_with("quantile_head") || name.starts_with("termination_head");
                let data = if i < n_fields {
                    uniform(&mut rng, (3.0 / spec.embed_dim as f64).sqrt(), n)
                } else if name.ends_with(".weight") && (init == Init::FullyRandom || !is_head) {
                    uniform(&mut rng, (6.0 / shape[1] as f64).sqrt(), n)
                } else if init == Init::FullyRandom {
                    uniform(&mut rng, 0.1, n)
                } else {
                    vec![0.0; n]
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(EngagementModel { spec, tensors })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.tensor_layout();
        if layout.len() != tensors.len() {
            return Err(Error::validation(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::validation(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    t.name, t.shape, name, shape
                )));
            }
        }
        Ok(EngagementModel { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    fn n_fields(&self) -> usize {
        self.spec.field_vocabs().len()
    }

    fn trunk_weight(&self, l: usize) -> usize {
        self.n_fields() + 2 * l
    }

    fn head_index(&self) -> usize {
        self.n_fields() + 2 * self.spec.hidden.len()
    }

    /// Embedding ids for `(state, action)`, range-checked.
    pub fn input_ids(&self, state: usize, action: usize) -> Result<Vec<usize>> {
        if let FeatureMap::Tabular { n_states } = self.spec.features {
            if state >= n_states {
                return Err(Error::validation(format!(
                    "state {state} out of range for {n_states} states"
                )));
            }
        }
        if action >= self.spec.n_actions {
            return Err(Error::validation(format!(
                "action {action} out of range for {} actions",
                self.spec.n_actions
            )));
        }
        let mut ids = self.spec.features.state_features(state);
        ids.push(action);
        if self.spec.cross_features {
            ids.push(ids[0] * self.spec.n_actions + action);
        }
        Ok(ids)
    }

    pub fn forward_cached(&self, state: usize, action: usize) -> Result<Activations> {
        let ids = self.input_ids(state, action)?;
        let d = self.spec.embed_dim;
        let mut x = Vec::with_capacity(ids.len() * d);
        for (f, &id) in ids.iter().enumerate() {
            let table = &self.tensors[f].data;
            x.extend(table[id * d..(id + 1) * d].iter().map(|&v| f64::from(v)));
        }
        let mut layers = vec![x];
        let mut pre = Vec::with_capacity(self.spec.hidden.len());
        for l in 0..self.spec.hidden.len() {
            let w = self.trunk_weight(l);
            let z = affine(&self.tensors[w], &self.tensors[w + 1], &layers[l]);
            layers.push(z.iter().map(|&v| v.max(0.0)).collect());
            pre.push(z);
        }
        let h = layers.last().expect("input layer always present");
        let head = self.head_index();
        let quantiles = affine(&self.tensors[head], &self.tensors[head + 1], h);
        let logit = self
            .spec
            .termination_head
            .then(|| affine(&self.tensors[head + 2], &self.tensors[head + 3], h)[0]);
        Ok(Activations { ids, layers, pre, quantiles, logit })
    }

    /// Quantile outputs and termination probability (`None` without a
    /// termination head).
    pub fn forward(&self, state: usize, action: usize) -> Result<(Vec<f64>, Option<f64>)> {
        let act = self.forward_cached(state, action)?;
        Ok((act.quantiles, act.logit.map(sigmoid)))
    }

    /// Accumulates parameter gradients given output gradients.
    pub fn backward(&self, act: &Activations, d_quantiles: &[f64], d_logit: f64, grads: &mut Gradients) {
        let head = self.head_index();
        let h = act.layers.last().expect("input layer always present");
        let mut dh = vec![0.0; h.len()];
        affine_backward(&self.tensors[head], h, d_quantiles, &mut grads.0, head, &mut dh);
        if self.spec.termination_head {
            affine_backward(&self.tensors[head + 2], h, &[d_logit], &mut grads.0, head + 2, &mut dh);
        }
        for l in (0..self.spec.hidden.len()).rev() {
            let dz: Vec<f64> = dh
                .iter()
                .zip(&act.pre[l])
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
            let w = self.trunk_weight(l);
            let mut below = vec![0.0; act.layers[l].len()];
            affine_backward(&self.tensors[w], &act.layers[l], &dz, &mut grads.0, w, &mut below);
            dh = below;
        }
        let d = self.spec.embed_dim;
        for (f, &id) in act.ids.iter().enumerate() {
            let g = &mut grads.0[f][id * d..(id + 1) * d];
            for (gi, di) in g.iter_mut().zip(&dh[f * d..(f + 1) * d]) {
                *gi += di;
            }
        }
    }

    /// Copies every parameter from `other` (same spec).
    pub fn copy_from(&mut self, other: &EngagementModel) {
        debug_assert_eq!(self.spec, other.spec);
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
    }
}

fn affine(weight: &Tensor, bias: &Tensor, x: &[f64]) -> Vec<f64> {
    let in_dim = weight.shape[1];
    weight
        .data
        .chunks_exact(in_dim)
        .zip(&bias.data)
        .map(|(row, &b)| row.iter().zip(x).fold(f64::from(b), |acc, (&w, &xi)| acc + f64::from(w) * xi))
        .collect()
}

/// Backprop through `y = W x + b`: adds to the gradients of tensors
/// `idx` (weight) and `idx + 1` (bias) and to `dx`.
fn affine_backward(
    weight: &Tensor,
    x: &[f64],
    dy: &[f64],
    grads: &mut [Vec<f64>],
    idx: usize,
    dx: &mut [f64],
) {
    let in_dim = weight.shape[1];
    let (lo, hi) = grads.split_at_mut(idx + 1);
    let (gw, gb) = (&mut lo[idx], &mut hi[0]);
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        gb[o] += g;
        let row = &weight.data[o * in_dim..(o + 1) * in_dim];
        let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grow[i] += g * x[i];
            dx[i] += g * f64::from(row[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec(termination_head: bool) -> ModelSpec {
        ModelSpec {
            features: FeatureMap::Tabular { n_states: 4 },
            n_actions: 3,
            embed_dim: 4,
            hidden: vec![6, 5],
            n_quantiles: 3,
            termination_head,
            cross_features: false,
        }
    }

    #[test]
    fn fresh_model_predicts_zero_and_half() {
        let model = EngagementModel::new(small_spec(true), Init::Standard, 1).unwrap();
        let (q, ell) = model.forward(2, 1).unwrap();
        assert_eq!(q, vec![0.0; 3]);
        assert_eq!(ell, Some(0.5));
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let model = EngagementModel::new(small_spec(true), Init::FullyRandom, 5).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                let (q1, l1) = model.forward(s, a).unwrap();
                let (q2, l2) = model.forward(s, a).unwrap();
                assert_eq!(q1, q2);
                assert_eq!(l1, l2);
                let l = l1.unwrap();
                assert!(l > 0.0 && l < 1.0);
                assert!(q1.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let model = EngagementModel::new(small_spec(true), Init::Standard, 1).unwrap();
        assert!(model.forward(4, 0).is_err());
        assert!(model.forward(0, 3).is_err());
    }

    #[test]
    fn layout_without_termination_head() {
        let names: Vec<String> = small_spec(false).tensor_layout().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.starts_with("termination_head")));
        assert_eq!(names.len(), 2 + 4 + 2);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = EngagementModel::new(small_spec(true), Init::Standard, 9).unwrap();
        let b = EngagementModel::new(small_spec(true), Init::Standard, 9).unwrap();
        let c = EngagementModel::new(small_spec(true), Init::Standard, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn concurrent_readers_agree() {
        let model = EngagementModel::new(small_spec(true), Init::FullyRandom, 2).unwrap();
        let expected = model.forward(1, 2).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..4 {
                scope.spawn(|| assert_eq!(model.forward(1, 2).unwrap(), expected));
            }
        });
    }
}
