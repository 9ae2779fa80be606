use candle_core::{Device, Tensor};

use crate::error::Result;
use crate::nn::{Embedding, ParamBuilder};

pub const PAD_TOKEN: u32 = 0;

/// Hashed-vocabulary text encoder: lowercase whitespace tokens, FNV-1a into
/// `vocab_size - 1` buckets (bucket 0 is padding), fixed length.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab_size: usize,
    max_tokens: usize,
    table: Embedding,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Token ids for `prompt`, padded or truncated to `max_tokens`.
pub fn tokenize(prompt: &str, vocab_size: usize, max_tokens: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = prompt
        .split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            1 + (fnv1a(&w) % (vocab_size as u64 - 1)) as u32
        })
        .take(max_tokens)
        .collect();
    ids.resize(max_tokens, PAD_TOKEN);
    ids
}

impl TextEncoder {
    pub fn new(vb: &ParamBuilder, vocab_size: usize, dim: usize, max_tokens: usize) -> Result<Self> {
        Ok(Self {
            vocab_size,
            max_tokens,
            table: Embedding::new(vb, vocab_size, dim)?,
        })
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<u32> {
        tokenize(prompt, self.vocab_size, self.max_tokens)
    }

    /// `(L, D)` embedding of one prompt.
    pub fn embed(&self, prompt: &str, device: &Device) -> Result<Tensor> {
        let ids = Tensor::new(self.tokenize(prompt), device)?;
        self.table.forward(&ids)
    }

    /// `(B, L, D)` embeddings.
    pub fn embed_batch(&self, prompts: &[&str], device: &Device) -> Result<Tensor> {
        let ids: Vec<u32> = prompts.iter().flat_map(|p| self.tokenize(p)).collect();
        let ids = Tensor::from_vec(ids, (prompts.len(), self.max_tokens), device)?;
        self.table.forward(&ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_all_padding() {
        assert_eq!(tokenize("", 512, 6), vec![PAD_TOKEN; 6]);
        assert_eq!(tokenize("  ", 512, 3), vec![PAD_TOKEN; 3]);
    }

    #[test]
    fn tokenization_is_case_insensitive_and_truncates() {
        assert_eq!(tokenize("Red DISK", 512, 4), tokenize("red disk", 512, 4));
        assert_eq!(tokenize("a b c d e", 512, 3).len(), 3);
    }
}
