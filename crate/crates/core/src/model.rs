//! Encoder–decoder Transformer with pre-norm residual blocks, fixed
//! sinusoidal positions and per-head projection matrices.
//!
//! Every parameter lives in [`ModelParams`], addressed by a name derived from
//! its position in the network (`enc.0.self_attn.q.1`, `out.w`, ...). The
//! order of tensors is fixed by [`ModelConfig`], which is what checkpoints
//! rely on.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_on_tape, AttentionMask, HeadVars};
use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Matrix, Scalar};
use crate::tokenizer::{BOS_ID, MAX_CONTENT_LEN, PAD_ID};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 128 wide, 4 heads of 32, 512 feed-forward, 2+2 layers.
    pub fn new(vocab_src: usize, vocab_tgt: usize) -> Self {
        Self {
            vocab_src,
            vocab_tgt,
            d_model: 128,
            heads: 4,
            d_k: 32,
            d_v: 32,
            d_ff: 512,
            enc_layers: 2,
            dec_layers: 2,
            max_len: MAX_CONTENT_LEN,
            dropout: 0.1,
        }
    }

    /// d_model 8, 2 heads of 4, 1+1 layers, no dropout.
    pub fn tiny(vocab_src: usize, vocab_tgt: usize) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            ..Self::new(vocab_src, vocab_tgt)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model config: {m}")));
        if self.vocab_src < 4 || self.vocab_tgt < 4 {
            return bad("vocabularies must hold the 4 reserved symbols");
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return bad("d_model and d_ff must be positive");
        }
        if self.heads == 0 || self.d_k == 0 || self.d_v == 0 {
            return bad("heads, d_k and d_v must be positive");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("layer counts must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttnSlots {
    q: Vec<usize>,
    k: Vec<usize>,
    v: Vec<usize>,
    o: usize,
}

#[derive(Debug, Clone)]
struct NormSlots {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct FfnSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderSlots {
    norm1: NormSlots,
    attn: AttnSlots,
    norm2: NormSlots,
    ffn: FfnSlots,
}

#[derive(Debug, Clone)]
struct DecoderSlots {
    norm1: NormSlots,
    self_attn: AttnSlots,
    norm2: NormSlots,
    cross_attn: AttnSlots,
    norm3: NormSlots,
    ffn: FfnSlots,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// uniform(±1/√fan_in) with fan_in = rows
    Uniform,
    Zeros,
    Ones,
}

/// Index of each tensor plus the declaration order used for names/shapes.
#[derive(Debug, Clone)]
struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    encoder: Vec<EncoderSlots>,
    enc_norm: NormSlots,
    decoder: Vec<DecoderSlots>,
    dec_norm: NormSlots,
    out_w: usize,
    out_b: usize,
    specs: Vec<(String, (usize, usize), Init)>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut add = |name: String, shape: (usize, usize), init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let d = c.d_model;
        let src_embed = add("src_embed".into(), (c.vocab_src, d), Init::Uniform);
        let tgt_embed = add("tgt_embed".into(), (c.vocab_tgt, d), Init::Uniform);

        let norm = |add: &mut dyn FnMut(String, (usize, usize), Init) -> usize, p: &str| NormSlots {
            gain: add(format!("{p}.gain"), (1, d), Init::Ones),
            bias: add(format!("{p}.bias"), (1, d), Init::Zeros),
        };
        let attn = |add: &mut dyn FnMut(String, (usize, usize), Init) -> usize, p: &str| AttnSlots {
            q: (0..c.heads).map(|h| add(format!("{p}.q.{h}"), (d, c.d_k), Init::Uniform)).collect(),
            k: (0..c.heads).map(|h| add(format!("{p}.k.{h}"), (d, c.d_k), Init::Uniform)).collect(),
            v: (0..c.heads).map(|h| add(format!("{p}.v.{h}"), (d, c.d_v), Init::Uniform)).collect(),
            o: add(format!("{p}.o"), (c.heads * c.d_v, d), Init::Uniform),
        };
        let ffn = |add: &mut dyn FnMut(String, (usize, usize), Init) -> usize, p: &str| FfnSlots {
            w1: add(format!("{p}.w1"), (d, c.d_ff), Init::Uniform),
            b1: add(format!("{p}.b1"), (1, c.d_ff), Init::Zeros),
            w2: add(format!("{p}.w2"), (c.d_ff, d), Init::Uniform),
            b2: add(format!("{p}.b2"), (1, d), Init::Zeros),
        };

        let encoder = (0..c.enc_layers)
            .map(|l| EncoderSlots {
                norm1: norm(&mut add, &format!("enc.{l}.norm1")),
                attn: attn(&mut add, &format!("enc.{l}.self_attn")),
                norm2: norm(&mut add, &format!("enc.{l}.norm2")),
                ffn: ffn(&mut add, &format!("enc.{l}.ffn")),
            })
            .collect();
        let enc_norm = norm(&mut add, "enc.norm");
        let decoder = (0..c.dec_layers)
            .map(|l| DecoderSlots {
                norm1: norm(&mut add, &format!("dec.{l}.norm1")),
                self_attn: attn(&mut add, &format!("dec.{l}.self_attn")),
                norm2: norm(&mut add, &format!("dec.{l}.norm2")),
                cross_attn: attn(&mut add, &format!("dec.{l}.cross_attn")),
                norm3: norm(&mut add, &format!("dec.{l}.norm3")),
                ffn: ffn(&mut add, &format!("dec.{l}.ffn")),
            })
            .collect();
        let dec_norm = norm(&mut add, "dec.norm");
        let out_w = add("out.w".into(), (d, c.vocab_tgt), Init::Uniform);
        let out_b = add("out.b".into(), (1, c.vocab_tgt), Init::Zeros);
        Self {
            src_embed,
            tgt_embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
            specs,
        }
    }
}

/// All weights of a model, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: weight matrices uniform in ±1/√rows, biases
    /// zero, normalization gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = SplitMix64::new(seed);
        let mut names = Vec::with_capacity(layout.specs.len());
        let mut tensors = Vec::with_capacity(layout.specs.len());
        for (name, (rows, cols), init) in &layout.specs {
            let m = match init {
                Init::Zeros => Matrix::zeros(*rows, *cols),
                Init::Ones => Matrix::filled(*rows, *cols, T::one()),
                Init::Uniform => {
                    let fan_in = if name.ends_with("_embed") { *cols } else { *rows };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..rows * cols)
                        .map(|_| T::from_f64_lossy(rng.uniform(-bound, bound)))
                        .collect();
                    Matrix::from_vec(*rows, *cols, data)?
                }
            };
            names.push(name.clone());
            tensors.push(m);
        }
        Ok(Self { names, tensors })
    }

    /// Assemble from named tensors; names and shapes must match the layout
    /// of `config` exactly.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if named.len() != layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                layout.specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, m), (want, shape, _)) in named.into_iter().zip(&layout.specs) {
            if &name != want || m.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {want} {shape:?}",
                    m.shape()
                )));
            }
            names.push(name);
            tensors.push(m);
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in self.iter() {
            if !m.is_finite() {
                return Err(Error::NonFinite(name.to_owned()));
            }
        }
        Ok(())
    }
}

/// Encoder output for one source sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory<T: Scalar = f32> {
    /// One `d_model` row per source position.
    pub states: Matrix<T>,
    /// False at `<pad>` positions.
    pub key_visible: Vec<bool>,
}

impl<T: Scalar> Memory<T> {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Summed and per-token negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub sum: f64,
    pub tokens: usize,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.sum / self.tokens as f64
        }
    }
}

/// `-Σ log softmax(logits_j)[gold_j]` over rows whose gold id is not `<pad>`.
/// Row `j` of `logits` is the prediction for `gold[j]`.
pub fn loss<T: Scalar>(logits: &Matrix<T>, gold: &[u32]) -> Result<LossValue> {
    if logits.rows() != gold.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} gold symbols",
            logits.rows(),
            gold.len()
        )));
    }
    let targets: Vec<Option<u32>> = gold.iter().map(|&g| (g != PAD_ID).then_some(g)).collect();
    let mut tape = Tape::new();
    let l = tape.constant_ref(logits);
    let ce = tape.cross_entropy(l, &targets)?;
    Ok(LossValue {
        sum: tape.value(ce).get(0, 0).to_f64_lossy(),
        tokens: targets.iter().flatten().count(),
    })
}

/// One training example: source ids and a full target `<bos> … <eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// Gradients aligned with [`ModelParams`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T: Scalar = f32> {
    pub tensors: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub struct Transformer<T: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    params: ModelParams<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.specs.len()
            || params
                .iter()
                .zip(&layout.specs)
                .any(|((n, m), (want, shape, _))| n != want || m.shape() != *shape)
        {
            return Err(Error::Checkpoint(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    /// Run the encoder (inference mode) on source ids; `<pad>` positions are
    /// hidden from attention.
    pub fn encode(&self, source: &[u32]) -> Result<Memory<T>> {
        let mut g = Graph::new(self, None);
        let (mem, key_visible) = g.encode(source)?;
        Ok(Memory {
            states: g.tape.value(mem).clone(),
            key_visible,
        })
    }

    /// Logits for every position of `prefix` (inference mode). Row `i`
    /// depends on `prefix[..=i]` and the memory only.
    pub fn decode_logits(&self, prefix: &[u32], memory: &Memory<T>) -> Result<Matrix<T>> {
        if prefix.first() != Some(&BOS_ID) {
            return Err(Error::InvalidArgument("decoder prefix must start with <bos>".into()));
        }
        let mut g = Graph::new(self, None);
        let mem = g.tape.constant_ref(&memory.states);
        let logits = g.decode(mem, &memory.key_visible, prefix)?;
        Ok(g.tape.value(logits).clone())
    }

    /// Teacher-forced loss of `target` (`<bos> … <eos>`) given `source`.
    pub fn sequence_loss(&self, source: &[u32], target: &[u32]) -> Result<LossValue> {
        if target.len() < 2 {
            return Err(Error::InvalidArgument("target needs <bos> and at least one symbol".into()));
        }
        let memory = self.encode(source)?;
        let logits = self.decode_logits(&target[..target.len() - 1], &memory)?;
        loss(&logits, &target[1..])
    }

    /// Mean per-token loss over a batch and its gradient for every parameter.
    /// Sequences are padded to the longest in the batch. Dropout is applied
    /// only when `dropout_rng` is given.
    pub fn batch_gradients(
        &self,
        batch: &[Example],
        dropout_rng: Option<&mut SplitMix64>,
    ) -> Result<(LossValue, ParamGrads<T>)> {
        self.batch_gradients_scaled(batch, dropout_rng, T::one())
    }

    pub(crate) fn batch_gradients_scaled(
        &self,
        batch: &[Example],
        dropout_rng: Option<&mut SplitMix64>,
        seed: T,
    ) -> Result<(LossValue, ParamGrads<T>)> {
        let mut g = Graph::new(self, dropout_rng);
        let (root, value) = g.batch_loss(batch)?;
        let mut grads = g.tape.backward(root, seed)?;
        let tensors = g.collect_grads(&mut grads);
        for (name, m) in self.params.names.iter().zip(&tensors) {
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok((value, ParamGrads { tensors }))
    }

    /// Mean per-token loss over a batch without recording gradients of
    /// interest (inference mode, no dropout).
    pub fn batch_loss(&self, batch: &[Example]) -> Result<LossValue> {
        let mut g = Graph::new(self, None);
        Ok(g.batch_loss(batch)?.1)
    }
}

/// Sinusoidal position table: `sin(pos / 10000^(2i/d))` on even columns,
/// `cos` on odd ones.
pub fn positional_encoding<T: Scalar>(len: usize, d_model: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, d_model);
    for pos in 0..len {
        for c in 0..d_model {
            let i2 = (c - c % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            m.set(pos, c, T::from_f64_lossy(v));
        }
    }
    m
}

/// Forward graph under construction for one model.
struct Graph<'p, 'r, T: Scalar> {
    model: &'p Transformer<T>,
    tape: Tape<'p, T>,
    vars: Vec<Option<Var>>,
    dropout: Option<&'r mut SplitMix64>,
}

impl<'p, 'r, T: Scalar> Graph<'p, 'r, T> {
    fn new(model: &'p Transformer<T>, dropout: Option<&'r mut SplitMix64>) -> Self {
        let dropout = dropout.filter(|_| model.config.dropout > 0.0);
        Self {
            model,
            tape: Tape::new(),
            vars: vec![None; model.params.len()],
            dropout,
        }
    }

    fn p(&mut self, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = self.tape.param(&self.model.params.tensors[slot]);
        self.vars[slot] = Some(v);
        v
    }

    fn collect_grads(&self, grads: &mut Gradients<T>) -> Vec<Matrix<T>> {
        self.model
            .params
            .tensors
            .iter()
            .zip(&self.vars)
            .map(|(m, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
            })
            .collect()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config.dropout;
        let Some(rng) = self.dropout.as_deref_mut() else {
            return Ok(x);
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.next_f64() < rate { T::zero() } else { keep })
            .collect();
        self.tape.mask(x, mask)
    }

    fn embed(&mut self, table: usize, ids: &[u32]) -> Result<Var> {
        let d = self.model.config.d_model;
        let t = self.p(table);
        let e = self.tape.gather(t, ids)?;
        let e = self.tape.scale(e, T::from_usize(d).unwrap().sqrt());
        let pe = self.tape.constant(positional_encoding(ids.len(), d));
        let x = self.tape.add(e, pe)?;
        self.dropout(x)
    }

    fn norm(&mut self, x: Var, s: &NormSlots) -> Result<Var> {
        let (g, b) = (self.p(s.gain), self.p(s.bias));
        self.tape.layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))
    }

    fn attention(&mut self, x_q: Var, x_kv: Var, mask: Rc<[bool]>, s: &AttnSlots) -> Result<Var> {
        let heads = HeadVars {
            query: s.q.iter().map(|&i| self.p(i)).collect(),
            key: s.k.iter().map(|&i| self.p(i)).collect(),
            value: s.v.iter().map(|&i| self.p(i)).collect(),
            output: self.p(s.o),
        };
        multi_head_on_tape(&mut self.tape, x_q, x_kv, Some(mask), &heads)
    }

    fn ffn(&mut self, x: Var, s: &FfnSlots) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(s.w1), self.p(s.b1), self.p(s.w2), self.p(s.b2));
        let h = self.tape.matmul(x, w1)?;
        let h = self.tape.add_row(h, b1)?;
        let h = self.tape.relu(h);
        let o = self.tape.matmul(h, w2)?;
        self.tape.add_row(o, b2)
    }

    /// `x + dropout(sublayer)`
    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(sub)?;
        self.tape.add(x, sub)
    }

    fn encode(&mut self, source: &[u32]) -> Result<(Var, Vec<bool>)> {
        if source.is_empty() {
            return Err(Error::InvalidArgument("empty source sequence".into()));
        }
        let model = self.model;
        let layout = &model.layout;
        let visible: Vec<bool> = source.iter().map(|&id| id != PAD_ID).collect();
        let mask = AttentionMask::keys(source.len(), &visible).to_shared();
        let mut x = self.embed(layout.src_embed, source)?;
        for layer in &layout.encoder {
            let h = self.norm(x, &layer.norm1)?;
            let a = self.attention(h, h, mask.clone(), &layer.attn)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &layer.norm2)?;
            let f = self.ffn(h, &layer.ffn)?;
            x = self.residual(x, f)?;
        }
        let out = self.norm(x, &layout.enc_norm)?;
        Ok((out, visible))
    }

    fn decode(&mut self, memory: Var, memory_visible: &[bool], prefix: &[u32]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty decoder prefix".into()));
        }
        let model = self.model;
        let layout = &model.layout;
        let visible: Vec<bool> = prefix.iter().map(|&id| id != PAD_ID).collect();
        let self_mask = AttentionMask::causal(&visible).to_shared();
        let cross_mask = AttentionMask::keys(prefix.len(), memory_visible).to_shared();
        let mut x = self.embed(layout.tgt_embed, prefix)?;
        for layer in &layout.decoder {
            let h = self.norm(x, &layer.norm1)?;
            let a = self.attention(h, h, self_mask.clone(), &layer.self_attn)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &layer.norm2)?;
            let a = self.attention(h, memory, cross_mask.clone(), &layer.cross_attn)?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &layer.norm3)?;
            let f = self.ffn(h, &layer.ffn)?;
            x = self.residual(x, f)?;
        }
        let h = self.norm(x, &layout.dec_norm)?;
        let (w, b) = (self.p(layout.out_w), self.p(layout.out_b));
        let logits = self.tape.matmul(h, w)?;
        self.tape.add_row(logits, b)
    }

    /// Root node (mean loss) and its value.
    fn batch_loss(&mut self, batch: &[Example]) -> Result<(Var, LossValue)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let src_len = batch.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let tgt_len = batch.iter().map(|e| e.target.len()).max().unwrap_or(0);
        let mut total: Option<Var> = None;
        let mut tokens = 0usize;
        for ex in batch {
            if ex.target.len() < 2 || ex.target[0] != BOS_ID {
                return Err(Error::InvalidArgument(
                    "training target must be <bos> … with at least one symbol".into(),
                ));
            }
            let mut src = ex.source.clone();
            src.resize(src_len, PAD_ID);
            let mut tgt = ex.target.clone();
            tgt.resize(tgt_len, PAD_ID);

            let (mem, visible) = self.encode(&src)?;
            let logits = self.decode(mem, &visible, &tgt[..tgt_len - 1])?;
            let gold: Vec<Option<u32>> =
                tgt[1..].iter().map(|&g| (g != PAD_ID).then_some(g)).collect();
            tokens += gold.iter().flatten().count();
            let ce = self.tape.cross_entropy(logits, &gold)?;
            total = Some(match total {
                Some(t) => self.tape.add(t, ce)?,
                None => ce,
            });
        }
        let total = total.expect("non-empty batch");
        let sum = self.tape.value(total).get(0, 0).to_f64_lossy();
        let root = self.tape.scale(total, T::one() / T::from_usize(tokens.max(1)).unwrap());
        Ok((root, LossValue { sum, tokens }))
    }
}
