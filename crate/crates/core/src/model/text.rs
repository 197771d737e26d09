use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attr_text::{tokenize, AttributeTaxonomy};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Words of the clinical sentence grammar besides taxonomy values.
const GLUE: &[&str] = &[
    "pulmonary",
    "infection",
    "infected",
    "area",
    "areas",
    "left",
    "right",
    "lung",
    "lungs",
    "and",
    ",",
    ".",
];

/// A text encoder whose weights never change during training.
pub trait FrozenTextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    /// Encodes tokens into a `d×L` array, padding or truncating to `L`.
    fn encode(&self, tokens: &[String]) -> Result<Tensor>;
}

/// Seeded `N(0, 1)` embedding table over a closed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTextEncoder {
    vocab: BTreeMap<String, usize>,
    /// `V×d`, row per token id.
    table: Tensor,
    dim: usize,
    max_len: usize,
    seed: u64,
}

impl LookupTextEncoder {
    pub fn new(taxonomy: &AttributeTaxonomy, dim: usize, max_len: usize, seed: u64) -> Self {
        let mut words: Vec<String> = vec![PAD.into(), UNK.into()];
        let mut push = |w: &str| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for g in GLUE {
            push(g);
        }
        for def in &taxonomy.attributes {
            for v in &def.values {
                for t in tokenize(v) {
                    push(&t);
                }
            }
        }
        Self::from_vocab(words, dim, max_len, seed)
    }

    /// Builds the table for an explicit ordered vocabulary; the first two
    /// entries must be the pad and unknown tokens.
    pub fn from_vocab(words: Vec<String>, dim: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_e1c0_de00_0000);
        let table = normal_tensor(&mut rng, &[words.len(), dim], 1.0);
        let vocab = words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        LookupTextEncoder {
            vocab,
            table,
            dim,
            max_len,
            seed,
        }
    }

    pub fn vocabulary(&self) -> Vec<String> {
        let mut words: Vec<(usize, &String)> = self.vocab.iter().map(|(w, &i)| (i, w)).collect();
        words.sort();
        words.into_iter().map(|(_, w)| w.clone()).collect()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn id(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(self.vocab[UNK])
    }
}

impl FrozenTextEncoder for LookupTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, tokens: &[String]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        let (d, l) = (self.dim, self.max_len);
        let pad = self.vocab[PAD];
        let ids: Vec<usize> = (0..l)
            .map(|t| tokens.get(t).map_or(pad, |tok| self.id(tok)))
            .collect();
        let table = self.table.data();
        Ok(Tensor::from_fn(&[d, l], |i| {
            let (k, t) = (i / l, i % l);
            table[ids[t] * d + k]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> LookupTextEncoder {
        LookupTextEncoder::new(&AttributeTaxonomy::default(), 8, 12, 3)
    }

    #[test]
    fn pads_to_fixed_length_with_pad_embedding() {
        let e = enc();
        let toks = tokenize("Bilateral, three, middle lower, upper middle.");
        assert_eq!(toks.len(), 10);
        let x = e.encode(&toks).unwrap();
        assert_eq!(x.shape(), &[8, 12]);
        let pad_row = &e.table().data()[0..8];
        for t in 10..12 {
            for k in 0..8 {
                assert_eq!(x.data()[k * 12 + t], pad_row[k]);
            }
        }
        assert_eq!(x, e.encode(&toks).unwrap());
    }

    #[test]
    fn covers_taxonomy_and_rejects_empty_text() {
        let e = enc();
        for w in [
            "bilateral",
            "unilateral",
            "six",
            "middle",
            "lower",
            "no",
            ",",
        ] {
            assert_ne!(e.id(w), e.id(UNK), "{w}");
        }
        assert!(matches!(e.encode(&[]), Err(Error::EmptyText)));
        let long: Vec<String> = (0..40).map(|_| "lung".to_string()).collect();
        assert_eq!(e.encode(&long).unwrap().shape(), &[8, 12]);
    }

    #[test]
    fn vocabulary_round_trips() {
        let e = enc();
        let again = LookupTextEncoder::from_vocab(e.vocabulary(), 8, 12, 3);
        assert_eq!(again, e);
    }
}
