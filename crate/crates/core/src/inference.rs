//! Autoregressive decoding and the text-to-text translation pipeline.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Memory, Transformer};
use crate::tensor::{log_softmax_f64, Scalar};
use crate::tokenizer::{Vocab, BOS_ID, EOS_ID, MAX_CONTENT_LEN, PAD_ID};
use crate::trainer::Checkpoint;
use crate::vicodec;

/// Anything that yields next-token logits for a decoder prefix.
pub trait StepModel {
    /// Logits over the target vocabulary for the symbol after `prefix`.
    /// `prefix` always starts with `<bos>`.
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A model with its source already encoded.
pub struct Conditioned<'a, T: Scalar = f32> {
    pub model: &'a Transformer<T>,
    pub memory: Memory<T>,
}

impl<'a, T: Scalar> Conditioned<'a, T> {
    pub fn new(model: &'a Transformer<T>, source: &[u32]) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.encode(source)?,
        })
    }
}

impl<T: Scalar> StepModel for Conditioned<'_, T> {
    fn next_logits(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits = self.model.decode_logits(prefix, &self.memory)?;
        Ok(logits
            .row(logits.rows() - 1)
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Content-token budget; `<bos>`/`<eos>` are extra.
    pub max_len: usize,
    pub length_norm_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_size: 4,
            max_len: MAX_CONTENT_LEN,
            length_norm_alpha: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidArgument("beam size must be at least 1".into()));
        }
        if self.length_norm_alpha.is_nan() || self.length_norm_alpha < 0.0 {
            return Err(Error::InvalidArgument("length-norm alpha must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with `<bos>`; ends with `<eos>` unless the length budget ran out.
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Self {
            ids: vec![BOS_ID],
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Tokens other than `<bos>`/`<eos>`.
    pub fn content(&self) -> &[u32] {
        let end = if self.ids.last() == Some(&EOS_ID) && self.ids.len() > 1 {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[1..end]
    }

    /// `log_prob / max(content_len, 1)^alpha`
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        self.log_prob / (self.content().len().max(1) as f64).powf(alpha)
    }

    fn extend(&self, token: u32, log_prob: f64, max_len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.push(token);
        let mut h = Self {
            ids,
            log_prob: self.log_prob + log_prob,
            finished: false,
        };
        h.finished = token == EOS_ID || h.content().len() >= max_len;
        h
    }
}

/// `<pad>` and `<bos>` are never generated.
fn can_emit(id: usize) -> bool {
    id != PAD_ID as usize && id != BOS_ID as usize
}

fn step_log_probs(model: &dyn StepModel, prefix: &[u32]) -> Result<Vec<f64>> {
    let logits = model.next_logits(prefix)?;
    if logits.len() <= EOS_ID as usize {
        return Err(Error::Shape(format!("{} logits cannot cover <eos>", logits.len())));
    }
    let lp = log_softmax_f64(&logits);
    if lp.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("decoder step distribution".into()));
    }
    Ok(lp)
}

/// Append the most probable symbol (lowest id on ties) until `<eos>` or the
/// content budget.
pub fn greedy_decode(model: &dyn StepModel, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis::start();
    h.finished = max_len == 0;
    while !h.finished {
        let lp = step_log_probs(model, &h.ids)?;
        let (best, &score) = lp
            .iter()
            .enumerate()
            .filter(|&(id, _)| can_emit(id))
            .fold((usize::MAX, &f64::NEG_INFINITY), |acc, cur| {
                if acc.0 == usize::MAX || cur.1 > acc.1 {
                    cur
                } else {
                    acc
                }
            });
        h = h.extend(best as u32, score, max_len);
    }
    Ok(h)
}

/// Higher score first, then lexicographically smaller id sequence.
fn rank(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search. Each step keeps the `k` best extensions of the live
/// hypotheses, where `k` is the beam size minus the number already
/// finished; finished ones are retired. Returns up to `beam_size`
/// hypotheses ordered by length-normalized score.
pub fn beam_decode(model: &dyn StepModel, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let width = config.beam_size;
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live = vec![Hypothesis::start()];
    if config.max_len == 0 {
        live[0].finished = true;
        return Ok(live);
    }
    while !live.is_empty() && finished.len() < width {
        let mut candidates: Vec<(f64, Vec<u32>, usize, u32, f64)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let lp = step_log_probs(model, &h.ids)?;
            for (id, &l) in lp.iter().enumerate().filter(|&(id, _)| can_emit(id)) {
                let mut ids = h.ids.clone();
                ids.push(id as u32);
                candidates.push((h.log_prob + l, ids, hi, id as u32, l));
            }
        }
        candidates.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        candidates.truncate(width - finished.len());
        let mut next = Vec::with_capacity(candidates.len());
        for (_, _, hi, id, l) in candidates {
            let h = live[hi].extend(id, l, config.max_len);
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }
    let alpha = config.length_norm_alpha;
    finished.sort_by(|a, b| rank((a.normalized_score(alpha), &a.ids), (b.normalized_score(alpha), &b.ids)));
    finished.truncate(width);
    Ok(finished)
}

/// Best hypothesis under the configured strategy.
pub fn decode(model: &dyn StepModel, config: &DecodeConfig) -> Result<Hypothesis> {
    config.validate()?;
    match config.strategy {
        Strategy::Greedy => greedy_decode(model, config.max_len),
        Strategy::Beam => beam_decode(model, config)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into())),
    }
}

/// Checkpointed model plus everything needed to go from English text to
/// readable Vietnamese.
#[derive(Debug, Clone)]
pub struct Translator {
    pub model: Transformer,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub decode: DecodeConfig,
    pub max_source_length: usize,
}

impl Translator {
    pub fn from_checkpoint(ck: &Checkpoint, decode: DecodeConfig) -> Result<Self> {
        decode.validate()?;
        Ok(Self {
            model: ck.model()?,
            source_vocab: ck.source_vocab.clone(),
            target_vocab: ck.target_vocab.clone(),
            decode,
            max_source_length: MAX_CONTENT_LEN,
        })
    }

    pub fn source_ids(&self, text: &str) -> Vec<u32> {
        self.source_vocab
            .encode_ids_with_limit(text, true, self.max_source_length)
    }

    /// Best hypothesis for `text`.
    pub fn hypothesis(&self, text: &str) -> Result<Hypothesis> {
        let cond = Conditioned::new(&self.model, &self.source_ids(text))?;
        decode(&cond, &self.decode)
    }

    /// Encoded (ASCII) target text.
    pub fn translate_encoded(&self, text: &str) -> Result<String> {
        let h = self.hypothesis(text)?;
        self.target_vocab.decode_ids(&h.ids)
    }

    /// Readable Vietnamese.
    pub fn translate(&self, text: &str) -> Result<String> {
        Ok(vicodec::decode(&self.translate_encoded(text)?))
    }
}
