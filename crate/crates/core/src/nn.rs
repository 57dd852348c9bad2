//! Parameter initialization and a linear layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Draws every parameter from its own stream keyed by `(seed, name)`, so a
/// parameter's initial value does not depend on which other parameters
/// exist or on registration order.
#[derive(Debug, Clone, Copy)]
pub struct Initializer {
    pub seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn tensor(&self, name: &str, shape: &[usize], init: Init) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Uniform(bound) => {
                let mut rng = stream(self.seed, name);
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape.to_vec(), data).expect("length matches shape")
            }
        }
    }

    pub fn add(
        &self,
        store: &mut ParamStore,
        name: String,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<ParamId, Error> {
        let t = self.tensor(&name, shape, init);
        Ok(store.add(name, t, trainable)?)
    }
}

fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// `in_dim x out_dim` weight with fan-in uniform init, plus an optional
    /// bias with the same bound.
    pub fn new(
        store: &mut ParamStore,
        init: &Initializer,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
    ) -> Result<Self, Error> {
        Self::with_init(store, init, prefix, in_dim, out_dim, bias, trainable, Init::fan_in(in_dim), Init::fan_in(in_dim))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        init: &Initializer,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
        weight_init: Init,
        bias_init: Init,
    ) -> Result<Self, Error> {
        let weight = init.add(store, format!("{prefix}.weight"), &[in_dim, out_dim], weight_init, trainable)?;
        let bias = if bias {
            Some(init.add(store, format!("{prefix}.bias"), &[out_dim], bias_init, trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, Error> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_bias(y, b)?;
        }
        Ok(y)
    }

    pub fn numel(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_on_name_and_seed_only() {
        let a = Initializer::new(7).tensor("x.weight", &[3, 4], Init::Uniform(0.5));
        let b = Initializer::new(7).tensor("x.weight", &[3, 4], Init::Uniform(0.5));
        let c = Initializer::new(7).tensor("y.weight", &[3, 4], Init::Uniform(0.5));
        let d = Initializer::new(8).tensor("x.weight", &[3, 4], Init::Uniform(0.5));
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(!a.bit_eq(&d));
        assert!(a.data().iter().all(|v| v.abs() <= 0.5));
    }
}
