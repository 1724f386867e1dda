//! Named trainable parameter storage and initialization.

use rand::Rng;

use crate::tensor::{Shape, Tape, Tensor};

/// One trainable weight block: a named, shaped f64 buffer. The name is the
/// stable identity used by the optimizer, the checkpoint manifest, and
/// gradient diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Shape, values: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(values.len(), shape.len(), "param {name}: value/shape mismatch");
        Param {
            name,
            shape,
            values,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Shape) -> Self {
        let n = shape.len();
        Param::new(name, shape, vec![0.0; n])
    }

    pub fn filled(name: impl Into<String>, shape: Shape, v: f64) -> Self {
        let n = shape.len();
        Param::new(name, shape, vec![v; n])
    }

    /// Uniform(-limit, limit) initialization.
    pub fn uniform(name: impl Into<String>, shape: Shape, limit: f64, rng: &mut impl Rng) -> Self {
        let values = (0..shape.len()).map(|_| rng.gen_range(-limit..limit)).collect();
        Param::new(name, shape, values)
    }

    /// Xavier-uniform: limit = sqrt(6 / (fan_in + fan_out)) with fan_in =
    /// rows and fan_out = cols.
    pub fn xavier(name: impl Into<String>, shape: Shape, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
        Param::uniform(name, shape, limit, rng)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Register on a tape as a gradient-requiring leaf for one forward pass.
    pub fn register(&self, tape: &mut Tape) -> Tensor {
        tape.leaf(self.values.clone(), self.shape)
    }
}
