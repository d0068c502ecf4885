//! Contextual token states for a sentence plus one synthetic sentence node.
//!
//! Row 0 of `H` is the synthetic node (built from the `NODE0` embedding),
//! rows `1..=n` are the tokens. Aspect tokens get a learned indicator vector
//! added to their input embedding before mixing.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;

use crate::autodiff::{Init, NodeId, ParamStore, Tape};
use crate::config::{EncoderConfig, EncoderKind};
use crate::data::{EmbeddingTable, Instance, NODE0, PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBED: &str = "encoder.embed";
pub const ASPECT: &str = "encoder.aspect";
const WINDOW_W: &str = "encoder.window.w";
const WINDOW_B: &str = "encoder.window.b";
const RNN: [&str; 2] = ["encoder.rnn.fwd", "encoder.rnn.bwd"];
const RNN_OUT_W: &str = "encoder.rnn.out.w";
const RNN_OUT_B: &str = "encoder.rnn.out.b";

/// Word → embedding row mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        for reserved in [UNK, PAD, NODE0] {
            if !index.contains_key(reserved) {
                return Err(Error::Invalid(format!("vocabulary lacks `{reserved}`")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn from_table(table: &EmbeddingTable) -> Self {
        Vocab::from_words(table.words().to_vec()).expect("embedding tables hold reserved entries")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(word)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    pub fn token_id(&self, token: &str, lowercase: bool) -> usize {
        if lowercase {
            self.id(&token.to_lowercase())
        } else {
            self.id(token)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodedSentence {
    /// `(n+1) × d` node states.
    pub h: NodeId,
    /// `1 × d` mean of the aspect rows.
    pub h_a: NodeId,
    /// Aspect rows within `1..=n`.
    pub aspect_rows: Range<usize>,
}

/// Register encoder parameters; embedding rows are copied from `table`.
pub fn init_params(
    store: &mut ParamStore,
    config: &EncoderConfig,
    table: &EmbeddingTable,
    rng: &mut impl Rng,
) -> Result<()> {
    let e = table.dim();
    let d = config.dim;
    store.insert(
        EMBED,
        Tensor::new(table.len(), e, table.flat_values().to_vec())?,
        Init::Given,
    )?;
    store.init(ASPECT, 1, e, Init::Uniform(0.1), rng)?;
    match config.kind {
        EncoderKind::Window => {
            store.init(WINDOW_W, (2 * config.window + 1) * e, d, Init::Glorot, rng)?;
            store.init(WINDOW_B, 1, d, Init::Zeros, rng)?;
        }
        EncoderKind::Recurrent => {
            for dir in RNN {
                store.init(format!("{dir}.gate.w"), e, d, Init::Glorot, rng)?;
                store.init(format!("{dir}.gate.b"), 1, d, Init::Zeros, rng)?;
                store.init(format!("{dir}.cand.w"), e, d, Init::Glorot, rng)?;
                store.init(format!("{dir}.cand.b"), 1, d, Init::Zeros, rng)?;
            }
            store.init(RNN_OUT_W, 2 * d, d, Init::Glorot, rng)?;
            store.init(RNN_OUT_B, 1, d, Init::Zeros, rng)?;
        }
    }
    Ok(())
}

/// Expected `(name, shape)` of every encoder parameter.
pub fn param_shapes(config: &EncoderConfig, vocab_len: usize, embed_dim: usize) -> Vec<(String, [usize; 2])> {
    let (e, d) = (embed_dim, config.dim);
    let mut out = vec![(EMBED.to_string(), [vocab_len, e]), (ASPECT.to_string(), [1, e])];
    match config.kind {
        EncoderKind::Window => {
            out.push((WINDOW_W.to_string(), [(2 * config.window + 1) * e, d]));
            out.push((WINDOW_B.to_string(), [1, d]));
        }
        EncoderKind::Recurrent => {
            for dir in RNN {
                out.push((format!("{dir}.gate.w"), [e, d]));
                out.push((format!("{dir}.gate.b"), [1, d]));
                out.push((format!("{dir}.cand.w"), [e, d]));
                out.push((format!("{dir}.cand.b"), [1, d]));
            }
            out.push((RNN_OUT_W.to_string(), [2 * d, d]));
            out.push((RNN_OUT_B.to_string(), [1, d]));
        }
    }
    out
}

pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    vocab: &Vocab,
    instance: &Instance,
    config: &EncoderConfig,
) -> Result<EncodedSentence> {
    let n = instance.tokens.len();
    if n == 0 {
        return Err(Error::InvalidInstance {
            id: instance.id.clone(),
            message: "empty token list".into(),
        });
    }
    let (a0, a1) = instance.aspect_span;
    let token_ids: Vec<usize> = instance
        .tokens
        .iter()
        .map(|t| vocab.token_id(t, config.lowercase))
        .collect();

    let h = match config.kind {
        EncoderKind::Window => window_mixer(tape, store, vocab, &token_ids, (a0, a1), config.window)?,
        EncoderKind::Recurrent => recurrent_mixer(tape, store, vocab, &token_ids, (a0, a1))?,
    };

    let aspect_rows = a0 + 1..a1 + 1;
    let rows = tape.slice_rows(h, aspect_rows.start, aspect_rows.end)?;
    let total = tape.col_sums(rows)?;
    let h_a = tape.scale(total, 1.0 / aspect_rows.len() as f64)?;
    Ok(EncodedSentence { h, h_a, aspect_rows })
}

/// Add the aspect indicator to rows flagged in `mask`.
fn mark_aspect(tape: &mut Tape, store: &ParamStore, x: NodeId, mask: &[f64]) -> Result<NodeId> {
    let indicator = tape.param(store, ASPECT)?;
    let mask = tape.constant(Tensor::col_vector(mask))?;
    let marks = tape.matmul(mask, indicator)?;
    tape.add(x, marks)
}

fn window_mixer(
    tape: &mut Tape,
    store: &ParamStore,
    vocab: &Vocab,
    token_ids: &[usize],
    (a0, a1): (usize, usize),
    w: usize,
) -> Result<NodeId> {
    let n = token_ids.len();
    let pad = vocab.id(PAD);

    let mut padded = vec![pad; w];
    padded.extend_from_slice(token_ids);
    padded.extend(std::iter::repeat_n(pad, w));
    let x = tape.gather(store, EMBED, &padded)?;
    let mask: Vec<f64> = (0..n + 2 * w)
        .map(|p| if p >= w + a0 && p < w + a1 { 1.0 } else { 0.0 })
        .collect();
    let x = mark_aspect(tape, store, x, &mask)?;

    let shifted: Vec<NodeId> = (0..=2 * w)
        .map(|o| tape.slice_rows(x, o, o + n))
        .collect::<Result<_>>()?;
    let tokens = tape.concat_cols(&shifted)?;

    // The synthetic node sees only padding around it.
    let mut node_window = vec![pad; 2 * w + 1];
    node_window[w] = vocab.id(NODE0);
    let nx = tape.gather(store, EMBED, &node_window)?;
    let pieces: Vec<NodeId> = (0..=2 * w)
        .map(|o| tape.slice_rows(nx, o, o + 1))
        .collect::<Result<_>>()?;
    let node = tape.concat_cols(&pieces)?;

    let all = tape.concat_rows(&[node, tokens])?;
    let weight = tape.param(store, WINDOW_W)?;
    let bias = tape.param(store, WINDOW_B)?;
    let pre = tape.matmul(all, weight)?;
    let pre = tape.add(pre, bias)?;
    tape.tanh(pre)
}

fn recurrent_mixer(
    tape: &mut Tape,
    store: &ParamStore,
    vocab: &Vocab,
    token_ids: &[usize],
    (a0, a1): (usize, usize),
) -> Result<NodeId> {
    let m = token_ids.len() + 1;
    let mut ids = vec![vocab.id(NODE0)];
    ids.extend_from_slice(token_ids);
    let x = tape.gather(store, EMBED, &ids)?;
    let mask: Vec<f64> = (0..m)
        .map(|r| if r > a0 && r <= a1 { 1.0 } else { 0.0 })
        .collect();
    let x = mark_aspect(tape, store, x, &mask)?;

    let mut passes = Vec::with_capacity(2);
    for (dir, reverse) in RNN.into_iter().zip([false, true]) {
        let gw = tape.param(store, &format!("{dir}.gate.w"))?;
        let gb = tape.param(store, &format!("{dir}.gate.b"))?;
        let cw = tape.param(store, &format!("{dir}.cand.w"))?;
        let cb = tape.param(store, &format!("{dir}.cand.b"))?;
        let z = tape.matmul(x, gw)?;
        let z = tape.add(z, gb)?;
        let z = tape.sigmoid(z)?;
        let c = tape.matmul(x, cw)?;
        let c = tape.add(c, cb)?;
        let c = tape.tanh(c)?;
        // s_t = z_t ⊙ s_{t-1} + (1 - z_t) ⊙ c_t
        let zc = tape.mul(z, c)?;
        let u = tape.sub(c, zc)?;

        let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
        let mut states = vec![None; m];
        let mut prev: Option<NodeId> = None;
        for t in order {
            let u_t = tape.slice_rows(u, t, t + 1)?;
            let s = match prev {
                None => u_t,
                Some(p) => {
                    let z_t = tape.slice_rows(z, t, t + 1)?;
                    let carry = tape.mul(z_t, p)?;
                    tape.add(carry, u_t)?
                }
            };
            states[t] = Some(s);
            prev = Some(s);
        }
        let states: Vec<NodeId> = states.into_iter().map(|s| s.expect("every step visited")).collect();
        passes.push(tape.concat_rows(&states)?);
    }
    let both = tape.concat_cols(&passes)?;
    let ow = tape.param(store, RNN_OUT_W)?;
    let ob = tape.param(store, RNN_OUT_B)?;
    let pre = tape.matmul(both, ow)?;
    let pre = tape.add(pre, ob)?;
    tape.tanh(pre)
}
