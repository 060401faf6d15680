//! Adam with inverse-square-root warmup, the epoch loop, and the checkpoint
//! file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CATMT001"
//! version    u32      currently 1
//! header     u32 length, then that many bytes of UTF-8 JSON
//! tensors    u32 count, then per tensor:
//!              u16 name length, name bytes (UTF-8)
//!              u8 dtype (0 = f32), u8 ndim, ndim × u32 dims
//!              product(dims) × f32 raw data
//! ```
//!
//! The header holds the model config, training metadata, optimizer
//! hyperparameters and step, both vocab files with their SHA-256 digests, and
//! the lowercase flag. The tensor table lists the model parameters in layout
//! order followed by the Adam moments (`adam.m.<name>`, `adam.v.<name>`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{Example, LossValue, ModelConfig, ModelParams, ParamGrads, Transformer};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;
use crate::tokenizer::{Vocab, MAX_CONTENT_LEN};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CATMT001";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_source_length: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub seed: u64,
    #[serde(skip)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 4,
            max_source_length: MAX_CONTENT_LEN,
            warmup_steps: 400,
            lr_scale: 1.0,
            seed: 42,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.max_source_length == 0 {
            return Err(Error::InvalidArgument("max source length must be at least 1".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::InvalidArgument("warmup steps must be at least 1".into()));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return Err(Error::InvalidArgument("learning-rate scale must be positive".into()));
        }
        Ok(())
    }
}

/// `scale · d_model^-½ · min(step^-½, step · warmup^-1.5)` for `step ≥ 1`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64, scale: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    /// Zeroed moments for tensors of the given shapes; β1 0.9, β2 0.98, ε 1e-9.
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m,
            v,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.tensors().iter().map(Matrix::shape))
    }

    /// One bias-corrected update of `params` in place. All gradients are
    /// checked before anything is modified.
    pub fn update(
        &mut self,
        names: &[String],
        params: &mut [Matrix],
        grads: &[Matrix],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!("gradient shape for {name}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = (*p as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

/// Apply one Adam step to every model tensor.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let names = params.names().to_vec();
    state.update(&names, params.tensors_mut(), &grads.tensors, lr)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    /// Per-epoch token-mean training loss.
    pub train_loss: Vec<f64>,
    /// Per-epoch token-mean validation loss, absent without a validation split.
    pub valid_loss: Vec<Option<f64>>,
}

/// Everything needed to resume training or translate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub meta: TrainingMeta,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
    optimizer_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lowercase: bool,
    source_vocab: String,
    source_vocab_digest: String,
    target_vocab: String,
    target_vocab_digest: String,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Transformer> {
        Transformer::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            optimizer_step: self.optimizer.step,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            lowercase: self.source_vocab.lowercase(),
            source_vocab: self.source_vocab.to_file_string(),
            source_vocab_digest: self.source_vocab.digest(),
            target_vocab: self.target_vocab.to_file_string(),
            target_vocab_digest: self.target_vocab.digest(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

        let mut out = Vec::with_capacity(16 + json.len() + 12 * 4 * self.params.total_len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);

        let names = self.params.names();
        let mut table: Vec<(String, &Matrix)> = self.params.iter().map(|(n, m)| (n.to_owned(), m)).collect();
        table.extend(names.iter().zip(&self.optimizer.m).map(|(n, m)| (format!("adam.m.{n}"), m)));
        table.extend(names.iter().zip(&self.optimizer.v).map(|(n, m)| (format!("adam.v.{n}"), m)));
        out.extend_from_slice(&u32_len(table.len())?.to_le_bytes());
        for (name, m) in table {
            let n = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(2);
            out.extend_from_slice(&u32_len(m.rows())?.to_le_bytes());
            out.extend_from_slice(&u32_len(m.cols())?.to_le_bytes());
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

        let vocab = |text: &str, digest: &str, side: &str| -> Result<Vocab> {
            let v = Vocab::parse(text, header.lowercase).map_err(|(line, msg)| {
                Error::Checkpoint(format!("{side} vocab line {line}: {msg}"))
            })?;
            if v.digest() != digest {
                return Err(Error::Checkpoint(format!("{side} vocab digest mismatch")));
            }
            Ok(v)
        };
        let source_vocab = vocab(&header.source_vocab, &header.source_vocab_digest, "source")?;
        let target_vocab = vocab(&header.target_vocab, &header.target_vocab_digest, "target")?;
        if source_vocab.len() != header.config.vocab_src || target_vocab.len() != header.config.vocab_tgt {
            return Err(Error::Checkpoint("vocab sizes disagree with the model config".into()));
        }

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let ndim = r.u8()?;
            if ndim != 2 {
                return Err(Error::Checkpoint(format!("tensor {name}: expected 2 dims, got {ndim}")));
            }
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor table",
                bytes.len() - r.pos
            )));
        }

        let n = tensors.len() / 3;
        if tensors.len() != 3 * n {
            return Err(Error::Checkpoint("tensor table is not params + two moments".into()));
        }
        let mut v_part = tensors.split_off(2 * n);
        let mut m_part = tensors.split_off(n);
        let params = ModelParams::from_named(&header.config, tensors)?;
        let moments = |part: &mut Vec<(String, Matrix)>, prefix: &str| -> Result<Vec<Matrix>> {
            part.drain(..)
                .zip(params.iter())
                .map(|((name, m), (pn, pm))| {
                    if name != format!("{prefix}{pn}") || m.shape() != pm.shape() {
                        Err(Error::Checkpoint(format!("unexpected optimizer tensor {name}")))
                    } else {
                        Ok(m)
                    }
                })
                .collect()
        };
        let m = moments(&mut m_part, "adam.m.")?;
        let v = moments(&mut v_part, "adam.v.")?;
        Ok(Self {
            config: header.config,
            params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                beta1: header.beta1,
                beta2: header.beta2,
                eps: header.eps,
                m,
                v,
            },
            meta: header.meta,
            source_vocab,
            target_vocab,
        })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Load, refusing a checkpoint whose config differs from `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with {:?}, model expects {:?}",
                ck.config, expected
            )));
        }
        Ok(ck)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Turn pairs into id sequences: sources wrapped `<bos> … <eos>` and cut to
/// `max_source_length` content tokens, targets (encoded side) likewise at the
/// fixed content budget.
pub fn examples(
    dataset: &Dataset,
    source_vocab: &Vocab,
    target_vocab: &Vocab,
    max_source_length: usize,
) -> Vec<Example> {
    dataset
        .iter()
        .map(|p| Example {
            source: source_vocab.encode_ids_with_limit(&p.source, true, max_source_length),
            target: target_vocab.encode_ids(&p.encoded_target, true),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss (training loss when there is no validation split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Token-mean loss over `data` in inference mode, in batches.
pub fn evaluate_loss(model: &Transformer, data: &[Example], batch_size: usize) -> Result<LossValue> {
    let mut total = LossValue { sum: 0.0, tokens: 0 };
    for batch in data.chunks(batch_size.max(1)) {
        let l = model.batch_loss(batch)?;
        total.sum += l.sum;
        total.tokens += l.tokens;
    }
    Ok(total)
}

/// Train a freshly initialized model (seeded by `cfg.seed`).
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Example],
    valid_set: &[Example],
    source_vocab: &Vocab,
    target_vocab: &Vocab,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if model_config.vocab_src != source_vocab.len() || model_config.vocab_tgt != target_vocab.len() {
        return Err(Error::InvalidArgument(
            "model vocab sizes differ from the supplied vocabularies".into(),
        ));
    }
    let mut model = Transformer::<f32>::new(model_config.clone(), cfg.seed)?;
    let mut opt = OptimizerState::for_params(model.params());
    let mut rng = SplitMix64::new(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut dropout_rng = rng.fork();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut meta = TrainingMeta {
        seed: cfg.seed,
        ..TrainingMeta::default()
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let snapshot = |model: &Transformer, opt: &OptimizerState, meta: &TrainingMeta| Checkpoint {
        config: model_config.clone(),
        params: model.params().clone(),
        optimizer: opt.clone(),
        meta: meta.clone(),
        source_vocab: source_vocab.clone(),
        target_vocab: target_vocab.clone(),
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut lr = 0.0;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = LossValue { sum: 0.0, tokens: 0 };
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let step = opt.step + 1;
            let result = model
                .batch_gradients(&batch, Some(&mut dropout_rng))
                .and_then(|(loss, grads)| {
                    if !loss.sum.is_finite() {
                        return Err(Error::NonFinite("training loss".into()));
                    }
                    lr = lr_at(step, model_config.d_model, cfg.warmup_steps, cfg.lr_scale);
                    let mut next = model.params().clone();
                    let mut next_opt = opt.clone();
                    optimizer_step(&mut next, &grads, &mut next_opt, lr)?;
                    next.check_finite()?;
                    Ok((loss, next, next_opt))
                });
            match result {
                Ok((loss, next, next_opt)) => {
                    *model.params_mut() = next;
                    opt = next_opt;
                    epoch_loss.sum += loss.sum;
                    epoch_loss.tokens += loss.tokens;
                }
                Err(Error::NonFinite(what)) => {
                    log::error!("non-finite {what} at step {step}");
                    let last_good = match (&cfg.checkpoint_path, &best) {
                        (Some(path), Some(_)) => path.display().to_string(),
                        (Some(path), None) => {
                            meta.step = opt.step;
                            snapshot(&model, &opt, &meta).save(path)?;
                            path.display().to_string()
                        }
                        (None, _) => "none (no checkpoint path)".into(),
                    };
                    return Err(Error::Diverged { step, last_good });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = epoch_loss.mean();
        let valid_loss = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, valid_set, cfg.batch_size)?.mean())
        };
        meta.epoch = epoch;
        meta.step = opt.step;
        meta.train_loss.push(train_loss);
        meta.valid_loss.push(valid_loss);
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}{} lr {lr:.2e}",
            cfg.epochs,
            valid_loss.map_or(String::new(), |v| format!(" valid loss {v:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            steps: opt.step,
            train_loss,
            valid_loss,
            lr,
        });
        let score = valid_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            let ck = snapshot(&model, &opt, &meta);
            if let Some(path) = &cfg.checkpoint_path {
                ck.save(path)?;
            }
            best = Some((score, ck));
        }
    }
    let last = snapshot(&model, &opt, &meta);
    let (_, mut best) = best.expect("at least one epoch");
    // the best snapshot keeps the history of the whole run
    best.meta.train_loss.clone_from(&meta.train_loss);
    best.meta.valid_loss.clone_from(&meta.valid_loss);
    Ok(TrainOutcome { best, last, history })
}
