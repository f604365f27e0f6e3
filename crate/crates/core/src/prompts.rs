//! Trainable prompt parameters.

use serde::{Deserialize, Serialize};

use crate::numerics::{SeededRng, Tensor};
use crate::{Error, Result};

const PROMPT_INIT_STD: f64 = 0.02;

/// Sizes that determine the prompt banks of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptShape {
    pub ways: usize,
    pub shots: usize,
    /// Diversity prompts per support image.
    pub n_v: usize,
    /// Tokens per diversity prompt.
    pub length: usize,
    /// Deep tokens per encoder layer.
    pub deep_tokens: usize,
}

impl PromptShape {
    pub fn bank_size(&self) -> usize {
        self.ways * self.shots * self.n_v
    }
}

/// One independent `l × d` prompt per augmented support image, stored as
/// a `[N_v·l, d]` matrix whose rows `i·l..(i+1)·l` belong to entry `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiversityPromptBank {
    tokens: Tensor,
    length: usize,
}

/// `L` groups of `p` deep tokens, stored as `[L·p, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepPromptStack {
    tokens: Tensor,
    layers: usize,
}

fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * PROMPT_INIT_STD).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

pub fn init_prompt_banks(
    shape: &PromptShape,
    embed_dim: usize,
    layers: usize,
    rng: &SeededRng,
) -> Result<(DiversityPromptBank, DeepPromptStack)> {
    if shape.ways == 0 || shape.shots == 0 || shape.n_v == 0 || shape.length == 0 {
        return Err(Error::invalid(format!("prompt bank needs N, K, n_v, l >= 1, got {shape:?}")));
    }
    if embed_dim == 0 || layers == 0 {
        return Err(Error::invalid("prompt dims must be non-zero"));
    }
    let bank = DiversityPromptBank::random(shape.bank_size(), shape.length, embed_dim, rng)?;
    let deep = DeepPromptStack::random(layers, shape.deep_tokens, embed_dim, rng)?;
    Ok((bank, deep))
}

impl DiversityPromptBank {
    pub fn random(entries: usize, length: usize, embed_dim: usize, rng: &SeededRng) -> Result<Self> {
        if entries == 0 || length == 0 || embed_dim == 0 {
            return Err(Error::invalid("diversity prompt bank cannot be empty"));
        }
        let mut rng = rng.substream("diversity-prompts");
        Ok(DiversityPromptBank {
            tokens: gaussian(entries * length, embed_dim, &mut rng),
            length,
        })
    }

    pub fn from_tensor(tokens: Tensor, length: usize) -> Result<Self> {
        if length == 0 || tokens.rows() % length != 0 || tokens.rows() == 0 {
            return Err(Error::shape(
                "diversity_bank",
                format!("{} rows are not a multiple of l = {}", tokens.rows(), length),
            ));
        }
        Ok(DiversityPromptBank { tokens, length })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows() / self.length
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Tensor {
        &mut self.tokens
    }

    /// The `l × d` tokens of entry `i`.
    pub fn entry(&self, i: usize) -> Result<Tensor> {
        if i >= self.len() {
            return Err(Error::OutOfRange { index: i, len: self.len() });
        }
        let d = self.embed_dim();
        let rows = &self.tokens.data()[i * self.length * d..(i + 1) * self.length * d];
        Tensor::matrix(self.length, d, rows.to_vec())
    }

    /// Entry `i` flattened row-major over (token, dim).
    pub fn prompt_vector(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.entry(i)?.into_data())
    }

    pub fn check_size(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::invalid(format!(
                "diversity bank has {} entries, episode needs N·K·n_v = {}",
                self.len(),
                expected
            )));
        }
        Ok(())
    }
}

/// Inverse of [`DiversityPromptBank::prompt_vector`].
pub fn unflatten_prompt(v: &[f64], length: usize) -> Result<Tensor> {
    if length == 0 || v.len() % length != 0 {
        return Err(Error::shape("unflatten_prompt", format!("{} values into {} tokens", v.len(), length)));
    }
    Tensor::matrix(length, v.len() / length, v.to_vec())
}

impl DeepPromptStack {
    pub fn random(layers: usize, per_layer: usize, embed_dim: usize, rng: &SeededRng) -> Result<Self> {
        if layers == 0 || embed_dim == 0 {
            return Err(Error::invalid("deep prompt stack needs layers and dim >= 1"));
        }
        let mut rng = rng.substream("deep-prompts");
        Ok(DeepPromptStack {
            tokens: gaussian(layers * per_layer, embed_dim, &mut rng),
            layers,
        })
    }

    pub fn zeros(layers: usize, per_layer: usize, embed_dim: usize) -> Self {
        DeepPromptStack {
            tokens: Tensor::zeros(layers * per_layer, embed_dim),
            layers,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn per_layer(&self) -> usize {
        self.tokens.rows() / self.layers
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Tensor {
        &mut self.tokens
    }

    pub fn group(&self, layer: usize) -> Result<Tensor> {
        if layer >= self.layers {
            return Err(Error::OutOfRange { index: layer, len: self.layers });
        }
        let p = self.per_layer();
        let d = self.tokens.cols();
        Tensor::matrix(p, d, self.tokens.data()[layer * p * d..(layer + 1) * p * d].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(ways: usize, shots: usize, n_v: usize) -> PromptShape {
        PromptShape {
            ways,
            shots,
            n_v,
            length: 1,
            deep_tokens: 5,
        }
    }

    #[test]
    fn bank_sizes_follow_budget() {
        let rng = SeededRng::new(0);
        let (bank, deep) = init_prompt_banks(&shape(5, 1, 24), 64, 4, &rng).unwrap();
        assert_eq!(bank.len(), 120);
        assert_eq!(deep.layers(), 4);
        assert_eq!(deep.per_layer(), 5);
        let (bank, _) = init_prompt_banks(&shape(5, 5, 4), 64, 4, &rng).unwrap();
        assert_eq!(bank.len(), 100);
        bank.check_size(100).unwrap();
        assert!(bank.check_size(99).is_err());
    }

    #[test]
    fn single_token_prompt_vector_is_the_token() {
        let rng = SeededRng::new(1);
        let (bank, _) = init_prompt_banks(&shape(2, 1, 2), 64, 1, &rng).unwrap();
        let v = bank.prompt_vector(3).unwrap();
        assert_eq!(v.len(), 64);
        assert_eq!(v.as_slice(), bank.tokens().row_slice(3));
    }

    #[test]
    fn multi_token_layout_and_round_trip() {
        let t = Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let bank = DiversityPromptBank::from_tensor(t, 2).unwrap();
        assert_eq!(bank.len(), 2);
        let v = bank.prompt_vector(1).unwrap();
        assert_eq!(v, vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(unflatten_prompt(&v, 2).unwrap(), bank.entry(1).unwrap());
        assert!(bank.prompt_vector(2).is_err());
    }

    #[test]
    fn zero_sized_config_is_rejected() {
        let rng = SeededRng::new(1);
        assert!(init_prompt_banks(&shape(5, 1, 0), 64, 4, &rng).is_err());
        assert!(init_prompt_banks(&shape(0, 1, 4), 64, 4, &rng).is_err());
    }

    #[test]
    fn entries_are_independent_draws() {
        let rng = SeededRng::new(2);
        let (bank, _) = init_prompt_banks(&shape(1, 1, 3), 16, 1, &rng).unwrap();
        assert_ne!(bank.prompt_vector(0).unwrap(), bank.prompt_vector(1).unwrap());
        let std = (bank.tokens().data().iter().map(|v| v * v).sum::<f64>() / 48.0).sqrt();
        assert!(std > 0.01 && std < 0.03, "{std}");
    }
}
