//! Category-prompt conditioning: a learned embedding table over the class
//! vocabulary plus a pad row and a null row, padded to a fixed token count.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, VarPath};

/// Number of condition tokens every prompt is padded to.
pub const DEFAULT_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Parameter("empty vocabulary".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Parameter(format!("duplicate category `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Vocabulary(name.to_string()))
    }

    /// Row of the padding embedding in the table.
    pub fn pad_row(&self) -> usize {
        self.names.len()
    }

    /// Row of the null (C = ∅) embedding in the table.
    pub fn null_row(&self) -> usize {
        self.names.len() + 1
    }
}

/// K token embeddings fed to the denoiser's cross-attention.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    /// (K, d_cond)
    pub tokens: Tensor,
    pub is_null: bool,
}

/// Which categories a prompt names; `None` is the null condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Prompt {
    Null,
    Categories(Vec<String>),
}

impl Prompt {
    pub fn single(name: impl Into<String>) -> Self {
        Prompt::Categories(vec![name.into()])
    }
}

#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    vocab: Vocabulary,
    /// (vocab + 2, d_cond)
    table: Tensor,
    tokens: usize,
}

impl ConditionEmbedder {
    pub fn new(vs: &mut VarPath, vocab: Vocabulary, dim: usize, tokens: usize) -> Result<Self> {
        let table = vs.get(
            "table",
            &[vocab.len() + 2, dim],
            Init::Scaled {
                fan_in: 1,
                gain: 1.0,
            },
        )?;
        Ok(Self {
            vocab,
            table,
            tokens,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn token_count(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    /// Table rows for a prompt, before the embedding lookup.
    pub fn token_rows(&self, prompt: &Prompt) -> Result<Vec<u32>> {
        match prompt {
            Prompt::Null => Ok(vec![self.vocab.null_row() as u32; self.tokens]),
            Prompt::Categories(names) => {
                if names.len() > self.tokens {
                    return Err(Error::Parameter(format!(
                        "{} categories exceed the {}-token prompt",
                        names.len(),
                        self.tokens
                    )));
                }
                let mut rows = Vec::with_capacity(self.tokens);
                for n in names {
                    rows.push(self.vocab.index_of(n)? as u32);
                }
                rows.resize(self.tokens, self.vocab.pad_row() as u32);
                Ok(rows)
            }
        }
    }

    pub fn embed(&self, prompt: &Prompt) -> Result<ConditionEmbedding> {
        let rows = self.token_rows(prompt)?;
        let idx = Tensor::new(rows.as_slice(), self.table.device())?;
        Ok(ConditionEmbedding {
            tokens: self.table.index_select(&idx, 0)?,
            is_null: matches!(prompt, Prompt::Null),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::VarStore;
    use candle_core::DType;

    fn embedder() -> ConditionEmbedder {
        let mut vs = VarStore::new(5, DType::F32);
        let vocab = Vocabulary::new(["road", "car", "sky"]).unwrap();
        ConditionEmbedder::new(&mut vs.root().pp("cond"), vocab, 6, DEFAULT_TOKENS).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    #[test]
    fn null_prompt_repeats_null_row() {
        let e = embedder();
        let c = e.embed(&Prompt::Null).unwrap();
        assert!(c.is_null);
        let r = rows(&c.tokens);
        assert_eq!(r.len(), DEFAULT_TOKENS);
        assert!(r.iter().all(|row| row == &r[0]));
        let table = rows(&e.table);
        assert_eq!(r[0], table[e.vocab.null_row()]);
    }

    #[test]
    fn single_category_is_padded() {
        let e = embedder();
        let c = e.embed(&Prompt::single("road")).unwrap();
        assert!(!c.is_null);
        let r = rows(&c.tokens);
        let table = rows(&e.table);
        assert_eq!(r[0], table[0]);
        for row in &r[1..] {
            assert_eq!(row, &table[e.vocab.pad_row()]);
        }
        let again = e.embed(&Prompt::single("road")).unwrap();
        assert_eq!(rows(&again.tokens), r);
    }

    #[test]
    fn unknown_and_oversized_prompts() {
        let e = embedder();
        assert!(matches!(
            e.embed(&Prompt::single("boat")),
            Err(Error::Vocabulary(_))
        ));
        let many = Prompt::Categories(vec!["road".into(); DEFAULT_TOKENS + 1]);
        assert!(matches!(e.embed(&many), Err(Error::Parameter(_))));
        assert!(Vocabulary::new(["a", "a"]).is_err());
    }
}
