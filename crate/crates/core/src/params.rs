//! Named-tensor parameter registry shared by the encoder, heads, optimizer,
//! gradient checker and checkpoint format.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// What a tensor is indexed by. Used for registry scans such as "does this
/// model own any per-item rows".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    /// Rows indexed by attribute tokens or attribute values.
    FeatureEmbedding,
    /// Rows indexed by catalog item id.
    ItemIdEmbedding,
    Encoder,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    /// Gradient-check group the tensor reports under.
    pub group: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

/// Round to the nearest `f32`. Parameters live on the `f32` grid so that the
/// 32-bit checkpoint payload is lossless; arithmetic stays in `f64`.
#[inline]
pub fn snap(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        role: TensorRole,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        assert!(!self.by_name.contains_key(&name), "duplicate tensor {name}");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id.0);
        self.tensors.push(Tensor {
            name,
            group: group.into(),
            role,
            shape,
            data,
        });
        id
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        role: TensorRole,
        shape: Vec<usize>,
    ) -> ParamId {
        let n = shape.iter().product();
        self.add(name, group, role, shape, vec![0.0; n])
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        role: TensorRole,
        shape: Vec<usize>,
        value: f64,
    ) -> ParamId {
        let n = shape.iter().product();
        self.add(name, group, role, shape, vec![value; n])
    }

    /// Uniform in `[-bound, bound]`, snapped to `f32`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        role: TensorRole,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| snap(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, group, role, shape, data)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn count_role(&self, role: TensorRole) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.role == role)
            .map(Tensor::len)
            .sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            data: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    /// Mutable access to several distinct gradient buffers at once.
    pub fn disjoint_mut<const N: usize>(&mut self, ids: [ParamId; N]) -> [&mut [f64]; N] {
        self.data
            .get_disjoint_mut(ids.map(|id| id.0))
            .expect("distinct parameter ids")
            .map(|v| v.as_mut_slice())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|g| g.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.data.iter()
    }
}
