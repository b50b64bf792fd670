//! Toy text encoder: closed-vocabulary tokenizer with hard truncation, a
//! small transformer whose CLS output is the instruction feature `c_t`, and
//! the projection `ĉ_t = W_H · LN(c_t) + b_H` into the vision width.

use std::collections::HashMap;

use crate::bench::grammar_words;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Binder, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<cls>", "<unk>"];

pub const TEXT_PREFIX: &str = "text.";
pub const COND_PREFIX: &str = "cond.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order; duplicates are skipped.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.to_lowercase();
            if !ids.contains_key(&w) {
                ids.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Self { tokens, ids }
    }

    /// Vocabulary of the benchmark grammar.
    pub fn grammar() -> Self {
        Self::from_words(grammar_words())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One non-reserved token per line; line `k` holds id `k + 3`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().collect();
        let mut seen = std::collections::HashSet::new();
        for w in &words {
            if w.is_empty() || RESERVED.contains(w) || !seen.insert(*w) {
                return Err(Error::Format(format!("bad vocabulary line {w:?}")));
            }
        }
        Ok(Self::from_words(words))
    }
}

/// Token ids with CLS first and length at most the truncation limit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Build from raw ids; the first must be CLS.
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Parameter("token sequence must start with CLS".into()));
        }
        Ok(Self(ids))
    }
}

/// Lowercase, split on anything that is not alphanumeric, map through the
/// vocabulary, prepend CLS and cut to `max_len`.
pub fn tokenize_truncate(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Parameter(format!("max_len must be >= 2, got {max_len}")));
    }
    let lower = text.to_lowercase();
    let ids = std::iter::once(CLS)
        .chain(
            lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| vocab.id(w)),
        )
        .take(max_len)
        .collect();
    Ok(TokenSequence(ids))
}

/// Space-joined tokens after CLS.
pub fn detokenize(vocab: &Vocabulary, seq: &TokenSequence) -> String {
    seq.0[1..]
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Raw text feature and its projection into the vision width.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub c_t: Tensor,
    pub hat_c_t: Tensor,
}

pub fn init_text_encoder(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    vocab_size: usize,
    rng: &mut SplitMix64,
) {
    let d = cfg.d_text;
    store.insert("text.tok", Tensor::randn(&[vocab_size, d], 0.5, rng));
    store.insert("text.pos", Tensor::randn(&[cfg.max_len, d], 0.1, rng));
    for l in 0..cfg.text_layers {
        nn::init_block(store, &format!("text.blocks.{l}"), d, d * cfg.mlp_ratio, rng);
    }
    nn::init_layer_norm(store, "text.ln_f", d);
}

pub fn init_condition_projection(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut SplitMix64) {
    nn::init_linear(store, "cond.proj", cfg.d_text, cfg.d_vis, rng);
}

/// `c_t` (`1×D_T`): the final-layer feature at the CLS position.
pub fn encode_text(
    tape: &mut Tape,
    binder: &mut Binder,
    seq: &TokenSequence,
    cfg: &ModelConfig,
) -> Result<Var> {
    let tok = binder.var(tape, "text.tok")?;
    let vocab = tape.shape(tok)[0];
    if let Some(&bad) = seq.ids().iter().find(|&&id| id >= vocab) {
        return Err(Error::Vocabulary {
            id: bad,
            size: vocab,
        });
    }
    let pos = binder.var(tape, "text.pos")?;
    if seq.len() > tape.shape(pos)[0] {
        return Err(Error::Parameter(format!(
            "sequence of {} tokens exceeds {} positions",
            seq.len(),
            tape.shape(pos)[0]
        )));
    }
    let e = tape.gather_rows(tok, seq.ids())?;
    let positions: Vec<usize> = (0..seq.len()).collect();
    let p = tape.gather_rows(pos, &positions)?;
    let mut x = tape.add(e, p)?;
    for l in 0..cfg.text_layers {
        x = nn::block_forward(
            tape,
            binder,
            &format!("text.blocks.{l}"),
            x,
            cfg.text_heads,
            cfg.eps,
            None,
        )?;
    }
    let x = nn::norm_site(tape, binder, "text.ln_f", x, cfg.eps, None)?;
    tape.gather_rows(x, &[0])
}

/// `ĉ_t = W_H · LN(c_t) + b_H`, with an affine-free layer norm.
pub fn project_condition(
    tape: &mut Tape,
    binder: &mut Binder,
    c_t: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = tape.layer_norm_raw(c_t, cfg.eps)?;
    nn::linear(tape, binder, "cond.proj", n)
}

/// Untracked `c_t` for `text`, as a `D_T` vector.
pub fn text_embedding(
    params: &ParamStore,
    vocab: &Vocabulary,
    text: &str,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let seq = tokenize_truncate(vocab, text, cfg.max_len)?;
    let mut tape = Tape::new();
    let mut binder = Binder::inference(params);
    let c = encode_text(&mut tape, &mut binder, &seq, cfg)?;
    tape.value(c).reshape(&[cfg.d_text])
}

/// Untracked `c_t` and `ĉ_t` for `text`.
pub fn condition_embedding(
    params: &ParamStore,
    vocab: &Vocabulary,
    text: &str,
    cfg: &ModelConfig,
) -> Result<ConditionEmbedding> {
    let seq = tokenize_truncate(vocab, text, cfg.max_len)?;
    let mut tape = Tape::new();
    let mut binder = Binder::inference(params);
    let c = encode_text(&mut tape, &mut binder, &seq, cfg)?;
    let h = project_condition(&mut tape, &mut binder, c, cfg)?;
    Ok(ConditionEmbedding {
        c_t: tape.value(c).reshape(&[cfg.d_text])?,
        hat_c_t: tape.value(h).reshape(&[cfg.d_vis])?,
    })
}
