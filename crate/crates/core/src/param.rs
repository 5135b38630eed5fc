//! Named parameter storage and the small dense layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Position of a parameter inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameter arrays. Insertion order is the canonical order
/// used for gradients, optimizer state and checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn set(&mut self, id: ParamId, values: Vec<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        e.value = Tensor::from_vec(e.value.shape().to_vec(), values)?;
        Ok(())
    }

    /// Replaces every array, checking names and shapes against `self`.
    pub fn load(&mut self, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if arrays.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.entries.len(),
                arrays.len()
            )));
        }
        for (e, (name, shape, values)) in self.entries.iter_mut().zip(arrays) {
            if &e.name != name || e.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {shape:?} does not match model parameter {} {:?}",
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = Tensor::from_vec(shape.clone(), values.clone())?;
        }
        Ok(())
    }

    /// Puts every parameter on `tape` (trainable) or reuses the stored
    /// constants (inference).
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.value.clone())
                } else {
                    e.value.clone()
                }
            })
            .collect();
        Bound { tape, tensors }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    tensors: Vec<Tensor>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Fan-in scaled uniform initializer.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::raw(shape.to_vec(), v)
    }
}

/// `y = x W + b`, with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let w = init.uniform(&[c_in, c_out], bound);
        let b = init.uniform(&[c_out], bound);
        Linear {
            weight: params.push(format!("{name}.weight"), w),
            bias: params.push(format!("{name}.bias"), b),
            c_in,
            c_out,
        }
    }

    pub fn zeros(params: &mut Params, name: &str, c_in: usize, c_out: usize) -> Self {
        Linear {
            weight: params.push(format!("{name}.weight"), Tensor::zeros(&[c_in, c_out])),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            c_in,
            c_out,
        }
    }

    /// Applies the layer along the last axis of any-rank input.
    pub fn forward(&self, bound: &Bound, x: &Tensor) -> Result<Tensor> {
        let tape = bound.tape;
        let shape = x.shape().to_vec();
        if shape.last() != Some(&self.c_in) {
            return Err(Error::shape(format!(
                "linear expects {} input channels, got {shape:?}",
                self.c_in
            )));
        }
        let rows = x.len() / self.c_in;
        let flat = if shape.len() == 2 {
            x.clone()
        } else {
            tape.reshape(x, &[rows, self.c_in])?
        };
        let y = tape.matmul(&flat, bound.get(self.weight))?;
        let y = tape.add_bias(&y, bound.get(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.c_out;
            tape.reshape(&y, &out)
        }
    }
}

/// Stack of linear layers with leaky ReLU between them, and optionally
/// after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_activation: bool,
}

impl Mlp {
    pub fn new(
        params: &mut Params,
        init: &mut Init,
        name: &str,
        c_in: usize,
        widths: &[usize],
        final_activation: bool,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || c_in == 0 {
            return Err(Error::config(format!(
                "{name}: widths must be non-empty and positive, got {c_in} -> {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = c_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(params, init, &format!("{name}.{i}"), prev, w));
            prev = w;
        }
        Ok(Mlp {
            layers,
            final_activation,
        })
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn c_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.c_out)
    }

    pub fn forward(&self, bound: &Bound, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(bound, &h)?;
            if i < last || self.final_activation {
                h = bound.tape.leaky_relu(&h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Runs every layer after the first on an already-computed first-layer
    /// pre-activation.
    pub(crate) fn forward_from_first(&self, bound: &Bound, pre: &Tensor) -> Result<Tensor> {
        let tape = bound.tape;
        let last = self.layers.len() - 1;
        let mut h = pre.clone();
        if last > 0 || self.final_activation {
            h = tape.leaky_relu(&h, LEAKY_SLOPE)?;
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(bound, &h)?;
            if i < last || self.final_activation {
                h = tape.leaky_relu(&h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Zeroes the final layer so the MLP outputs exactly zero.
    pub fn zero_last(&self, params: &mut Params) -> Result<()> {
        if let Some(l) = self.layers.last() {
            params.set(l.weight, vec![0.0; l.c_in * l.c_out])?;
            params.set(l.bias, vec![0.0; l.c_out])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut params = Params::new();
            Mlp::new(
                &mut params,
                &mut Init { rng: &mut rng },
                "m",
                5,
                &[7, 3],
                true,
            )
            .unwrap();
            params
        };
        assert_eq!(build(), build());
        assert_eq!(build().count(), 5 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let mlp = Mlp::new(
            &mut params,
            &mut Init { rng: &mut rng },
            "m",
            4,
            &[3, 2],
            false,
        )
        .unwrap();
        mlp.zero_last(&mut params).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = Tensor::from_vec(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let y = mlp.forward(&bound, &x).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_handles_rank_three() {
        let mut params = Params::new();
        let lin = Linear::zeros(&mut params, "l", 2, 3);
        params.set(lin.bias, vec![1.0, 2.0, 3.0]).unwrap();
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let y = lin.forward(&bound, &Tensor::zeros(&[4, 5, 2])).unwrap();
        assert_eq!(y.shape(), &[4, 5, 3]);
        assert_eq!(&y.values()[..3], &[1.0, 2.0, 3.0]);
        assert!(lin.forward(&bound, &Tensor::zeros(&[4, 3])).is_err());
    }
}
