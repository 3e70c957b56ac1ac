//! Named, seeded parameter construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Adds parameters to a store under a dotted name prefix, drawing all
/// random values from one generator.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn from_fn(&mut self, name: &str, shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<ParamId> {
        let mut f = f;
        let value = Tensor::from_fn(shape, |i| T::from_f64(f(i)));
        self.store.add(format!("{}{name}", self.prefix), value)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.from_fn(name, shape, |_| v)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.from_fn(name, shape, |i| vals[i])
    }

    /// Depthwise `(c, 1, k, k)` kernel: unit centre tap plus uniform noise.
    pub fn near_delta(&mut self, name: &str, c: usize, k: usize, noise: f64) -> Result<ParamId> {
        let n = c * k * k;
        let centre = k * k / 2;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let base = if i % (k * k) == centre { 1.0 } else { 0.0 };
                base + self.rng.gen_range(-noise..noise)
            })
            .collect();
        self.from_fn(name, &[c, 1, k, k], |i| vals[i])
    }
}
