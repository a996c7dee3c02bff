//! Named parameter collections and forward-pass helpers.
//!
//! A [`ParamSet`] owns model weights between steps. Each training step
//! binds the set onto a fresh [`Tape`] (producing [`BoundParams`]), runs
//! the forward ops, then reads gradients back out in the same stable order
//! for the optimizer.

use rand_chacha::ChaCha8Rng;

use super::init;
use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor2;
use super::NnError;

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor2)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor under a unique name. Panics on duplicates: parameter
    /// names are compile-time constants in this codebase, so a clash is a
    /// programming error.
    pub fn insert(&mut self, name: &str, t: Tensor2) {
        assert!(
            self.get(name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Mutable references to every tensor in insertion order, for the
    /// optimizer.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    /// Copy every parameter onto `tape` as an input var.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.input(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Convenience: add `{name}.w` (He-uniform, in_dim x out_dim) and a zero
    /// `{name}.b` row. Use for layers feeding a ReLU.
    pub fn add_linear_he(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) {
        self.insert(&format!("{name}.w"), init::he_uniform(in_dim, out_dim, in_dim, rng));
        self.insert(&format!("{name}.b"), Tensor2::zeros(1, out_dim));
    }

    /// Convenience: add `{name}.w` (Xavier-uniform) and a zero `{name}.b`
    /// row. Use for linear output heads.
    pub fn add_linear_xavier(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) {
        self.insert(
            &format!("{name}.w"),
            init::xavier_uniform(in_dim, out_dim, in_dim, out_dim, rng),
        );
        self.insert(&format!("{name}.b"), Tensor2::zeros(1, out_dim));
    }

    /// Convenience: add `{name}.gamma` (ones) and `{name}.beta` (zeros) for a
    /// batch-norm over `dim` columns.
    pub fn add_batchnorm(&mut self, name: &str, dim: usize) {
        self.insert(
            &format!("{name}.gamma"),
            Tensor2::from_fn(1, dim, |_, _| 1.0),
        );
        self.insert(&format!("{name}.beta"), Tensor2::zeros(1, dim));
    }
}

/// Tape vars for a bound [`ParamSet`], in the set's insertion order.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Var for a parameter name. Panics if absent, for the same reason
    /// [`ParamSet::insert`] panics on duplicates.
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unknown parameter name: {name}"))
    }

    /// Gradients for every parameter, in binding order, ready for
    /// [`super::Adam::step`].
    pub fn grads_in_order(&self, grads: &mut Grads) -> Vec<Tensor2> {
        self.vars.iter().map(|(_, v)| grads.take(*v)).collect()
    }
}

/// x @ {name}.w + {name}.b
pub fn linear(tape: &mut Tape, params: &BoundParams, name: &str, x: Var) -> Result<Var, NnError> {
    let y = tape.matmul(x, params.var(&format!("{name}.w")))?;
    tape.add_bias(y, params.var(&format!("{name}.b")))
}

/// Linear layer kept for callers that want the weights outside a
/// [`ParamSet`]; thin wrapper used in a few classical-model heads.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub w: Tensor2,
    pub b: Tensor2,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Tensor2::zeros(in_dim, out_dim),
            b: Tensor2::zeros(1, out_dim),
        }
    }

    /// y = x W + b without a tape (inference path).
    pub fn forward(&self, x: &Tensor2) -> Tensor2 {
        let mut y = super::tensor::matmul(x, super::tensor::Trans::No, &self.w, super::tensor::Trans::No);
        for i in 0..y.rows() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(self.b.as_slice()) {
                *v += bv;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_update_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        params.add_linear_he("fc", 4, 2, &mut rng);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.input(Tensor2::from_fn(3, 4, |i, j| (i + j) as f64 * 0.1));
        let y = linear(&mut tape, &bound, "fc", x).unwrap();
        let loss = tape.reduce_mean(y).unwrap();
        let mut grads = tape.backward(loss).unwrap();

        let gs = bound.grads_in_order(&mut grads);
        assert_eq!(gs.len(), 2);
        assert_eq!(gs[0].shape(), (4, 2));
        assert_eq!(gs[1].shape(), (1, 2));
        // mean over 3x2 entries: bias gradient is 3 * (1/6) = 0.5 per column
        assert!((gs[1].at(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor2::zeros(1, 1));
        params.insert("w", Tensor2::zeros(1, 1));
    }
}
