//! Sentence encoder: token one-hots → learned word embeddings → LSTM; the
//! final hidden state is the sentence encoding u.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Binding, Graph, LstmCell, NodeId, ParamId, ParamSet};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TextError {
    #[error("malformed one-hot: {ones} bits set across {len} entries")]
    MalformedOneHot { ones: usize, len: usize },
    #[error("empty sentence")]
    EmptySentence,
    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
}

/// Record emitted when an overlong sentence is cut at `max_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    pub original_len: usize,
    pub kept: usize,
}

pub struct TextEncoder {
    pub vocab_size: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub max_len: usize,
    /// [|V|, d_x] word embedding matrix W_ω.
    pub w_embed: ParamId,
    pub lstm: LstmCell,
}

impl TextEncoder {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        d_x: usize,
        d_h: usize,
        max_len: usize,
    ) -> Self {
        assert!(d_x > 0 && d_h > 0 && vocab_size > 0 && max_len > 0);
        let w_embed = ps.add(
            "text.embed",
            crate::nn::layers::xavier(rng, &[vocab_size, d_x], vocab_size, d_x),
        );
        let lstm = LstmCell::new(ps, rng, "text.lstm", d_x, d_h);
        TextEncoder {
            vocab_size,
            d_x,
            d_h,
            max_len,
            w_embed,
            lstm,
        }
    }

    /// Index of the single set bit of a one-hot vector.
    pub fn onehot_index(&self, onehot: &[f64]) -> Result<usize, TextError> {
        if onehot.len() != self.vocab_size {
            return Err(TextError::MalformedOneHot {
                ones: usize::MAX,
                len: onehot.len(),
            });
        }
        let mut idx = None;
        let mut ones = 0usize;
        for (i, v) in onehot.iter().enumerate() {
            if *v == 1.0 {
                ones += 1;
                idx = Some(i);
            } else if *v != 0.0 {
                return Err(TextError::MalformedOneHot {
                    ones,
                    len: onehot.len(),
                });
            }
        }
        match (ones, idx) {
            (1, Some(i)) => Ok(i),
            _ => Err(TextError::MalformedOneHot {
                ones,
                len: onehot.len(),
            }),
        }
    }

    /// w_i = x_i W_ω: row lookup of the embedding matrix, as a [1,d_x] node.
    pub fn embed(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        onehot: &[f64],
    ) -> Result<NodeId, TextError> {
        let idx = self.onehot_index(onehot)?;
        Ok(self.embed_id(g, bind, ps, idx))
    }

    fn embed_id(&self, g: &mut Graph, bind: &mut Binding, ps: &ParamSet, id: usize) -> NodeId {
        let w = bind.node(g, ps, self.w_embed);
        g.embed_rows(w, &[id])
    }

    /// Feed the sentence through the LSTM from zero state; returns the final
    /// hidden state u ([1,d_h]) plus a truncation record if the sentence was
    /// longer than max_len.
    pub fn encode_ids(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        token_ids: &[usize],
    ) -> Result<(NodeId, Option<Truncation>), TextError> {
        if token_ids.is_empty() {
            return Err(TextError::EmptySentence);
        }
        if let Some(bad) = token_ids.iter().find(|id| **id >= self.vocab_size) {
            return Err(TextError::TokenOutOfRange {
                id: *bad,
                vocab: self.vocab_size,
            });
        }
        let truncation = if token_ids.len() > self.max_len {
            Some(Truncation {
                original_len: token_ids.len(),
                kept: self.max_len,
            })
        } else {
            None
        };
        let kept = &token_ids[..token_ids.len().min(self.max_len)];
        let (mut h, mut c) = self.lstm.zero_state(g, 1);
        for id in kept {
            let x = self.embed_id(g, bind, ps, *id);
            let (h2, c2) = self.lstm.step(g, bind, ps, x, h, c);
            h = h2;
            c = c2;
        }
        Ok((h, truncation))
    }

    /// One-hot-sequence flavour of [`encode_ids`].
    pub fn encode_sentence(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        ps: &ParamSet,
        tokens: &[Vec<f64>],
    ) -> Result<(NodeId, Option<Truncation>), TextError> {
        let ids = tokens
            .iter()
            .map(|t| self.onehot_index(t))
            .collect::<Result<Vec<_>, _>>()?;
        self.encode_ids(g, bind, ps, &ids)
    }

    /// Encode outside any training tape, returning the raw vector.
    pub fn encode_vec(&self, ps: &ParamSet, token_ids: &[usize]) -> Result<Vec<f64>, TextError> {
        let mut g = Graph::new();
        let mut bind = Binding::new(ps);
        let (u, _) = self.encode_ids(&mut g, &mut bind, ps, token_ids)?;
        Ok(g.val(u).data().to_vec())
    }
}

/// Convenience: one-hot vector for a token id.
pub fn onehot(id: usize, vocab_size: usize) -> Vec<f64> {
    let mut v = vec![0.0; vocab_size];
    v[id] = 1.0;
    v
}
