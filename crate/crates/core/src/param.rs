//! Named parameter storage, seeded initialisers and the two affine layers
//! every block is built from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Tensors are immutable; an optimiser step swaps in fresh leaves through
/// [`ParamStore::set`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<ParamId> {
        let name = name.into();
        if self.id_of(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let values = data.into_iter().map(T::from_f64).collect();
        self.entries.push((name, Tensor::param(values, shape)?));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces the values of one parameter with a fresh leaf (gradient cleared).
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        entry.1 = Tensor::param(data, entry.1.shape())?;
        Ok(())
    }

    /// Copy of the store with one tensor substituted; used to differentiate
    /// with respect to a single parameter.
    pub fn with_tensor(&self, id: ParamId, tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape() != self.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "with_tensor",
                lhs: self.get(id).shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        let mut out = self.clone();
        out.entries[id.0].1 = tensor;
        Ok(out)
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>().with_requires_grad(true)))
                .collect(),
        }
    }
}

/// Seeded weight generator. `stream` selects an independent ChaCha stream so
/// that adding parameters to one module never shifts another module's draws.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Normal(0, std²) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let z = self.normal();
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect()
    }

    /// Normal(0, 2/fan_in).
    pub fn he_normal(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..n).map(|_| self.normal() * std).collect()
    }
}

/// Standard deviation for projection weights.
pub const PROJECTION_STD: f64 = 0.02;

/// `y = x·W (+ b)` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            init.trunc_normal(fan_in * fan_out, PROJECTION_STD),
            &[fan_in, fan_out],
        )?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), vec![0.0; fan_out], &[fan_out])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(store.get(self.weight), self.bias.map(|b| store.get(b)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn build<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), vec![1.0; dim], &[dim])?,
            bias: store.register(format!("{name}.bias"), vec![0.0; dim], &[dim])?,
        })
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm(store.get(self.gain), store.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut s = ParamStore::<f64>::new();
        let a = s.register("a", vec![1.0, 2.0], &[2]).unwrap();
        assert!(s.register("a", vec![0.0], &[1]).is_err());
        assert_eq!(s.id_of("a"), Some(a));
        assert_eq!(s.name(a), "a");
        assert!(s.get(a).requires_grad());
        s.set(a, vec![3.0, 4.0]).unwrap();
        assert_eq!(s.get(a).data(), &[3.0, 4.0]);
        assert!(s.set(a, vec![1.0]).is_err());
        assert_eq!(s.num_scalars(), 2);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a = Initializer::new(7, 0).trunc_normal(100, 1.0);
        let b = Initializer::new(7, 0).trunc_normal(100, 1.0);
        let c = Initializer::new(7, 1).trunc_normal(100, 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn linear_layer_shapes() {
        let mut s = ParamStore::<f64>::new();
        let mut init = Initializer::new(0, 0);
        let l = Linear::build(&mut s, &mut init, "proj", 3, 5, true).unwrap();
        let y = l.forward(&s, &Tensor::ones(&[4, 3]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[4, 5]);
        assert_eq!(l.params().len(), 2);
    }
}
