//! Named trainable tensors.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Position of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters. Order is registration order and
/// is what the checkpoint format and optimizer state rely on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter into `g`. With `track` the leaves receive
    /// gradients; without it they are constants (inference).
    pub fn bind(&self, g: &mut Graph, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replaces all tensor values, keeping names. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> crate::Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(crate::Error::Argument(
                "parameter set does not match model layout".into(),
            ));
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Uniform `[-bound, bound]` tensor drawn from `rng`.
pub fn uniform(shape: &[usize], bound: Scalar, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("extents are positive")
}

/// He-style bound `sqrt(6 / fan_in)` for rectifier layers.
pub fn relu_bound(fan_in: usize) -> Scalar {
    (6.0 / fan_in as Scalar).sqrt()
}

/// `sqrt(1 / fan_in)` for linear and saturating layers.
pub fn linear_bound(fan_in: usize) -> Scalar {
    (1.0 / fan_in as Scalar).sqrt()
}
