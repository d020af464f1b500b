use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::{Graph, Tensor, Var};
use crate::scalar::Scalar;

pub(crate) const WORD: usize = 0;
pub(crate) const INITIAL: usize = 1;
pub(crate) const FINAL: usize = 2;
pub(crate) const POSITION: usize = 3;
pub(crate) const SEGMENT: usize = 4;
const GLOBAL: usize = 5;

const LAYER_PARTS: [&str; 16] = [
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.output.weight",
    "attn.output.bias",
    "attn.norm.gain",
    "attn.norm.bias",
    "ffn.inner.weight",
    "ffn.inner.bias",
    "ffn.output.weight",
    "ffn.output.bias",
    "ffn.norm.gain",
    "ffn.norm.bias",
];

/// Offsets of the per-layer tensors within a layer's block.
pub(crate) mod part {
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
}

pub(crate) fn layer_index(layer: usize, part: usize) -> usize {
    GLOBAL + layer * LAYER_PARTS.len() + part
}

pub(crate) fn output_bias_index(cfg: &ModelConfig) -> usize {
    GLOBAL + cfg.layers * LAYER_PARTS.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

/// Names, shapes and initializers of every parameter, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("embeddings.word".to_string(), vec![cfg.vocab_size, d], Init::Normal),
        (
            "embeddings.initial".to_string(),
            vec![cfg.num_initials, d],
            Init::Normal,
        ),
        ("embeddings.final".to_string(), vec![cfg.num_finals, d], Init::Normal),
        (
            "embeddings.position".to_string(),
            vec![cfg.max_len + 1, d],
            Init::Normal,
        ),
        ("embeddings.segment".to_string(), vec![2, d], Init::Normal),
    ];
    for l in 0..cfg.layers {
        for (k, name) in LAYER_PARTS.iter().enumerate() {
            let (shape, init) = match k {
                part::WQ | part::WK | part::WV | part::WO => (vec![d, d], Init::Normal),
                part::W1 => (vec![d, cfg.ffn], Init::Normal),
                part::W2 => (vec![cfg.ffn, d], Init::Normal),
                part::B1 => (vec![cfg.ffn], Init::Zero),
                part::LN1_G | part::LN2_G => (vec![d], Init::One),
                _ => (vec![d], Init::Zero),
            };
            out.push((format!("layer{l}.{name}"), shape, init));
        }
    }
    out.push(("output.bias".to_string(), vec![cfg.vocab_size], Init::Zero));
    out
}

/// All trainable tensors. The output head reuses `embeddings.word`; there
/// is no separate output matrix.
#[derive(Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for ModelParams<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut m = f.debug_map();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            m.entry(n, &t.shape());
        }
        m.finish()
    }
}

/// Draws from N(0, std²) restricted to two standard deviations.
fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("finite std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

pub const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal weights (std 0.02), zero biases, unit gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (names, tensors) = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(&shape),
                    Init::One => Tensor::full(&shape, T::one()),
                    Init::Normal => {
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| T::of(truncated_normal(&mut rng, INIT_STD))).collect();
                        Tensor::new(&shape, data).expect("shape matches data")
                    }
                };
                (name, t)
            })
            .unzip();
        Ok(ModelParams { names, tensors })
    }

    /// Every tensor filled with zeros; the shape template for gradients and
    /// optimizer moments.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (names, tensors) = layout(cfg)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .unzip();
        ModelParams { names, tensors }
    }

    /// Builds from named tensors, checking that names and shapes match the
    /// configuration exactly.
    pub fn from_named(cfg: &ModelConfig, mut named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if named.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        let mut names = Vec::with_capacity(expected.len());
        for (name, shape, _) in expected {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, configuration requires {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// The word embedding table, which is also the output projection.
    pub fn word_embeddings(&self) -> &Tensor<T> {
        &self.tensors[WORD]
    }

    pub fn word_embeddings_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensors[WORD]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a [`ModelParams`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps handles created elsewhere, e.g. by a gradient checker. They
    /// must follow the order of [`ModelParams::names`].
    pub fn new(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn at(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub(crate) fn layer(&self, layer: usize, part: usize) -> Var {
        self.vars[layer_index(layer, part)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcodec::PhonemeVocab;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk(10, &PhonemeVocab::standard());
        c.layers = 3;
        c.max_len = 7;
        c
    }

    #[test]
    fn layout_indices_agree_with_names() {
        let c = cfg();
        let p = ModelParams::<f32>::zeros(&c);
        assert_eq!(p.names()[layer_index(1, part::W1)], "layer1.ffn.inner.weight");
        assert_eq!(p.names()[layer_index(2, part::LN2_B)], "layer2.ffn.norm.bias");
        assert_eq!(p.names()[output_bias_index(&c)], "output.bias");
        assert_eq!(p.names().len(), output_bias_index(&c) + 1);
        assert_eq!(p.get("embeddings.position").unwrap().shape(), &[8, 64]);
    }

    #[test]
    fn init_statistics() {
        let p = ModelParams::<f64>::init(&cfg(), 1).unwrap();
        let w = p.get("layer0.ffn.inner.weight").unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= 0.04));
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        // Truncation at 2 sigma shrinks the std by a factor of about 0.88.
        assert!((var.sqrt() - 0.0176).abs() < 0.001, "{}", var.sqrt());
        assert!(p
            .get("layer1.attn.query.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(p.get("layer1.attn.norm.gain").unwrap().data().iter().all(|&x| x == 1.0));
        assert_eq!(ModelParams::<f64>::init(&cfg(), 1).unwrap(), p);
    }

    #[test]
    fn from_named_rejects_wrong_shapes() {
        let c = cfg();
        let p = ModelParams::<f32>::zeros(&c);
        let mut named: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named.reverse();
        assert_eq!(ModelParams::from_named(&c, named.clone()).unwrap(), p);
        named[0].1 = Tensor::zeros(&[1]);
        assert!(matches!(
            ModelParams::from_named(&c, named.clone()),
            Err(Error::Checkpoint(_))
        ));
        named.pop();
        assert!(ModelParams::from_named(&c, named).is_err());
    }
}
