//! Acceptance checks. Each prints one PASS/FAIL line; the process exits
//! nonzero when any check fails.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use catmt_core::attention::{multi_head, scaled_dot_attention, AttentionMask, MultiHeadWeights};
use catmt_core::corpus::{self, CategoryPair, Dataset, Side, SplitSpec};
use catmt_core::harvester::{
    self, extract_pair, Clock, EntityRecord, Fetcher, FixtureTransport, HarvestConfig, HarvestStatus,
    MockClock, QidBatch, RateLimiter,
};
use catmt_core::inference::{
    beam_decode, greedy_decode, Conditioned, DecodeConfig, Hypothesis, StepModel, Strategy,
    Translator,
};
use catmt_core::metrics::{self, EvalPair};
use catmt_core::model::{Example, ModelConfig, Transformer};
use catmt_core::rng::SplitMix64;
use catmt_core::tensor::{log_softmax_f64, Matrix};
use catmt_core::tokenizer::{Vocab, BOS_ID, EOS_ID, PAD_ID};
use catmt_core::trainer::{self, Checkpoint, TrainConfig};
use catmt_core::vicodec::{self, DiacriticTable};

const ROUNDTRIP_CASES: usize = 10_000;
const ROUNDTRIP_BUDGET: Duration = Duration::from_secs(1);
const ATTENTION_SHAPES: usize = 1_000;
const ATTENTION_TOL: f64 = 1e-6;
const GRAD_COORDS_PER_TENSOR: usize = 5;
const GRAD_REL_TOL: f64 = 1e-3;
// relative error denominator never drops below this
const GRAD_FLOOR: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const MASK_TRIALS: usize = 100;
const FACTOR_INSTANCES: usize = 100;
const FACTOR_TOL: f64 = 1e-5;
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const OVERFIT_EXACT: f64 = 0.95;
const OVERFIT_BLEU: f64 = 0.95;
const OVERFIT_ROUGE: f64 = 0.95;
const METEOR_TOL: f64 = 1e-9;
const BLEU_EXAMPLE: f64 = 0.7788;
const BLEU_EXAMPLE_TOL: f64 = 1e-3;
const BEAM_CASES: usize = 200;
const SPLIT_SIZES: usize = 100;
const CHECKPOINT_INPUTS: usize = 10;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn data(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

// ---------------------------------------------------------------- codec

fn codec() -> Check {
    let table = DiacriticTable::canonical();
    ensure(table.len() == 134, || format!("table has {} entries", table.len()))?;
    for (letter, want) in [('À', "@1"), ('Á', "@2"), ('Â', "@3"), ('Ỹ', "@133"), ('ỹ', "@134")] {
        let got = vicodec::encode(&letter.to_string());
        ensure(got == want, || format!("{letter} encoded as {got}, expected {want}"))?;
    }
    let letters: Vec<char> = table.entries().map(|(_, c)| c).collect();
    let plain: Vec<char> = ('a'..='z').chain('A'..='Z').chain(" -,.()'".chars()).collect();
    let mut rng = SplitMix64::new(2024);
    let cases: Vec<String> = (0..ROUNDTRIP_CASES)
        .map(|_| {
            let n = rng.below(40) as usize;
            (0..n)
                .map(|_| {
                    if rng.below(3) == 0 {
                        letters[rng.below(letters.len() as u64) as usize]
                    } else {
                        plain[rng.below(plain.len() as u64) as usize]
                    }
                })
                .collect()
        })
        .collect();
    let start = Instant::now();
    let mut failures = 0;
    for s in &cases {
        let enc = table.encode(s);
        if !enc.is_ascii() || table.decode(&enc.text).text != *s {
            failures += 1;
        }
    }
    let took = start.elapsed();
    ensure(failures == 0, || format!("{failures} of {ROUNDTRIP_CASES} roundtrips differ"))?;
    ensure(took < ROUNDTRIP_BUDGET, || format!("roundtrips took {took:?}"))?;
    Ok(format!("134 entries, anchors exact, {ROUNDTRIP_CASES} roundtrips in {took:.2?}"))
}

// ------------------------------------------------------------ attention

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix<f32> {
    let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale) as f32).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn attention() -> Check {
    let mut rng = SplitMix64::new(7);
    let mut worst = 0.0f64;
    for _ in 0..ATTENTION_SHAPES {
        let n_q = 1 + rng.below(8) as usize;
        let n_k = 1 + rng.below(8) as usize;
        let d_k = 1 + rng.below(16) as usize;
        let d_v = 1 + rng.below(16) as usize;
        let q = random_matrix(&mut rng, n_q, d_k, 3.0);
        let k = random_matrix(&mut rng, n_k, d_k, 3.0);
        let v = random_matrix(&mut rng, n_k, d_v, 1.0);
        let mask = if rng.below(2) == 0 {
            None
        } else {
            // every query keeps at least one key
            let allowed: Vec<bool> = (0..n_q * n_k)
                .map(|i| i % n_k == 0 || rng.below(2) == 0)
                .collect();
            Some(AttentionMask::new(n_q, n_k, allowed).map_err(err)?)
        };
        let a = scaled_dot_attention(&q, &k, &v, mask.as_ref()).map_err(err)?;
        for r in 0..n_q {
            let sum: f64 = a.weights.row(r).iter().map(|&w| w as f64).sum();
            worst = worst.max((sum - 1.0).abs());
            if let Some(m) = &mask {
                for c in 0..n_k {
                    ensure(m.is_allowed(r, c) || a.weights.get(r, c) == 0.0, || {
                        format!("masked key {c} of row {r} has weight {}", a.weights.get(r, c))
                    })?;
                }
            }
        }
    }
    ensure(worst <= ATTENTION_TOL, || format!("row sum off by {worst:e}"))?;

    // d_k = 1 hand example against a scalar softmax
    let q = Matrix::from_rows(&[&[1.0f64]]);
    let k = Matrix::from_rows(&[&[1.0], &[0.0]]);
    let v = Matrix::from_rows(&[&[2.0], &[0.0]]);
    let a = scaled_dot_attention(&q, &k, &v, None).map_err(err)?;
    let (s0, s1) = (1.0f64 * 1.0 / 1.0f64.sqrt(), 0.0f64);
    let z = s0.exp() + s1.exp();
    let (w0, w1) = (s0.exp() / z, s1.exp() / z);
    let out = w0 * 2.0 + w1 * 0.0;
    let hand_err = (a.weights.get(0, 0) - w0)
        .abs()
        .max((a.weights.get(0, 1) - w1).abs())
        .max((a.output.get(0, 0) - out).abs());
    ensure(hand_err <= ATTENTION_TOL, || format!("hand example off by {hand_err:e}"))?;
    ensure((out - 1.4621).abs() < 1e-4, || format!("hand output {out}"))?;

    // one head reduces to plain attention on the projected inputs
    let mut single_err = 0.0f64;
    for _ in 0..100 {
        let d_model = 1 + rng.below(8) as usize;
        let d_k = 1 + rng.below(8) as usize;
        let d_v = 1 + rng.below(8) as usize;
        let (n_q, n_k) = (1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
        let x_q = random_matrix(&mut rng, n_q, d_model, 1.0);
        let x_kv = random_matrix(&mut rng, n_k, d_model, 1.0);
        let w = MultiHeadWeights {
            query: vec![random_matrix(&mut rng, d_model, d_k, 1.0)],
            key: vec![random_matrix(&mut rng, d_model, d_k, 1.0)],
            value: vec![random_matrix(&mut rng, d_model, d_v, 1.0)],
            output: random_matrix(&mut rng, d_v, d_model, 1.0),
        };
        let mh = multi_head(&x_q, &x_kv, &x_kv, None, &w).map_err(err)?;
        let q = x_q.matmul(&w.query[0]).map_err(err)?;
        let k = x_kv.matmul(&w.key[0]).map_err(err)?;
        let v = x_kv.matmul(&w.value[0]).map_err(err)?;
        let plain = scaled_dot_attention(&q, &k, &v, None)
            .map_err(err)?
            .output
            .matmul(&w.output)
            .map_err(err)?;
        for (a, b) in mh.data().iter().zip(plain.data()) {
            single_err = single_err.max((*a as f64 - *b as f64).abs());
        }
    }
    ensure(single_err <= ATTENTION_TOL, || format!("h=1 differs by {single_err:e}"))?;
    Ok(format!(
        "{ATTENTION_SHAPES} shapes, worst row-sum error {worst:.1e}; hand example {hand_err:.1e}; h=1 {single_err:.1e}"
    ))
}

// ------------------------------------------------------- gradient check

fn gradient_check() -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::tiny(20, 20);
    let model = Transformer::<f32>::new(cfg.clone(), 11).map_err(err)?;
    let mut rng = SplitMix64::new(12);
    let batch: Vec<Example> = (0..3)
        .map(|_| {
            let src_len = 2 + rng.below(5) as usize;
            let tgt_len = 1 + rng.below(5) as usize;
            let mut target = vec![BOS_ID];
            target.extend((0..tgt_len).map(|_| 3 + rng.below(17) as u32));
            target.push(EOS_ID);
            Example {
                source: (0..src_len).map(|_| 3 + rng.below(17) as u32).collect(),
                target,
            }
        })
        .collect();
    let (_, grads) = model.batch_gradients(&batch, None).map_err(err)?;
    let mut probe = Transformer::<f64>::from_params(cfg, model.params().cast()).map_err(err)?;

    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    let names: Vec<String> = model.params().names().to_vec();
    for (t, name) in names.iter().enumerate() {
        let analytic = grads.tensors[t].data();
        let len = analytic.len();
        // the largest-gradient coordinates plus random ones
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut coords: Vec<usize> = order.iter().take(2).copied().collect();
        while coords.len() < GRAD_COORDS_PER_TENSOR.min(len) {
            let c = rng.below(len as u64) as usize;
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        for &c in &coords {
            let orig = probe.params().tensors()[t].data()[c];
            let mut at = |x: f64| -> std::result::Result<f64, String> {
                probe.params_mut().tensors_mut()[t].data_mut()[c] = x;
                Ok(probe.batch_loss(&batch).map_err(err)?.mean())
            };
            let numeric = (at(orig + GRAD_STEP)? - at(orig - GRAD_STEP)?) / (2.0 * GRAD_STEP);
            at(orig)?;
            let a = analytic[c] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{c}] backward {a:e} numeric {numeric:e}");
            }
            checked += 1;
        }
    }
    let took = start.elapsed();
    ensure(worst < GRAD_REL_TOL, || format!("relative error {worst:e} at {worst_at}"))?;
    ensure(took < GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "{} tensors, {checked} coordinates, worst relative error {worst:.1e}, {took:.1?}",
        names.len()
    ))
}

// -------------------------------------------------------------- masking

fn row_bits(m: &Matrix<f32>, r: usize) -> Vec<u32> {
    m.row(r).iter().map(|x| x.to_bits()).collect()
}

fn masking() -> Check {
    let mut rng = SplitMix64::new(31);
    for trial in 0..MASK_TRIALS {
        let vs = 6 + rng.below(20) as usize;
        let vt = 6 + rng.below(20) as usize;
        let m = Transformer::<f32>::new(ModelConfig::tiny(vs, vt), 100 + trial as u64).map_err(err)?;
        let src: Vec<u32> = (0..1 + rng.below(8)).map(|_| 3 + rng.below(vs as u64 - 3) as u32).collect();
        let mem = m.encode(&src).map_err(err)?;
        let len = 2 + rng.below(8) as usize;
        let mut prefix = vec![BOS_ID];
        prefix.extend((1..len).map(|_| 2 + rng.below(vt as u64 - 2) as u32));
        let base = m.decode_logits(&prefix, &mem).map_err(err)?;
        let j = 1 + rng.below(len as u64 - 1) as usize;
        let mut edited = prefix.clone();
        edited[j] = 2 + ((edited[j] - 2 + 1 + rng.below(vt as u64 - 3) as u32) % (vt as u32 - 2));
        let out = m.decode_logits(&edited, &mem).map_err(err)?;
        for i in 0..j {
            ensure(row_bits(&out, i) == row_bits(&base, i), || {
                format!("trial {trial}: editing position {j} changed logits row {i}")
            })?;
        }
    }

    for trial in 0..MASK_TRIALS {
        let vs = 6 + rng.below(20) as usize;
        let mut m = Transformer::<f32>::new(ModelConfig::tiny(vs, 8), 500 + trial as u64).map_err(err)?;
        let len = 2 + rng.below(10) as usize;
        let mut src: Vec<u32> = (0..len).map(|_| 3 + rng.below(vs as u64 - 3) as u32).collect();
        for _ in 0..1 + rng.below(len as u64 - 1) {
            let p = rng.below(len as u64) as usize;
            src[p] = PAD_ID;
        }
        if src.iter().all(|&t| t == PAD_ID) {
            src[0] = 3;
        }
        let base = m.encode(&src).map_err(err)?.states;
        // new content at the pad positions: the <pad> embedding row
        let embed = m.params().names().iter().position(|n| n == "src_embed").unwrap();
        let d = m.config().d_model;
        for x in &mut m.params_mut().tensors_mut()[embed].data_mut()[..d] {
            *x = rng.uniform(-5.0, 5.0) as f32;
        }
        let edited = m.encode(&src).map_err(err)?.states;
        let mut extended = src.clone();
        extended.extend(std::iter::repeat_n(PAD_ID, 1 + rng.below(4) as usize));
        let longer = m.encode(&extended).map_err(err)?.states;
        for (i, &t) in src.iter().enumerate() {
            if t == PAD_ID {
                continue;
            }
            ensure(row_bits(&edited, i) == row_bits(&base, i), || {
                format!("trial {trial}: pad embedding changed encoder row {i}")
            })?;
            ensure(row_bits(&longer, i) == row_bits(&edited, i), || {
                format!("trial {trial}: trailing pads changed encoder row {i}")
            })?;
        }
    }
    Ok(format!("{MASK_TRIALS} causal and {MASK_TRIALS} pad trials, bitwise"))
}

// -------------------------------------------------------- factorization

fn factorization() -> Check {
    let mut rng = SplitMix64::new(41);
    let mut worst = 0.0f64;
    for i in 0..FACTOR_INSTANCES {
        let vs = 6 + rng.below(20) as usize;
        let vt = 6 + rng.below(20) as usize;
        let m = Transformer::<f32>::new(ModelConfig::tiny(vs, vt), 900 + i as u64).map_err(err)?;
        let src: Vec<u32> = (0..1 + rng.below(8)).map(|_| 3 + rng.below(vs as u64 - 3) as u32).collect();
        let mut tgt = vec![BOS_ID];
        tgt.extend((0..rng.below(8)).map(|_| 3 + rng.below(vt as u64 - 3) as u32));
        tgt.push(EOS_ID);
        let mem = m.encode(&src).map_err(err)?;
        let mut stepwise = 0.0;
        for t in 1..tgt.len() {
            let logits = m.decode_logits(&tgt[..t], &mem).map_err(err)?;
            stepwise += log_softmax_f64(logits.row(t - 1))[tgt[t] as usize];
        }
        let loss = m.sequence_loss(&src, &tgt).map_err(err)?;
        worst = worst.max((stepwise + loss.sum).abs());
    }
    ensure(worst <= FACTOR_TOL, || format!("stepwise sum differs from -loss by {worst:e}"))?;
    Ok(format!("{FACTOR_INSTANCES} instances, worst gap {worst:.1e}"))
}

// ------------------------------------------------ overfit and checkpoint

struct Overfit {
    checkpoint: Checkpoint,
    dataset: Dataset,
}

fn train_toy() -> std::result::Result<(Overfit, Duration), String> {
    let dataset = Dataset::load(data("toy_pairs.jsonl")).map_err(err)?;
    let sv = Vocab::build(&dataset, Side::Source, true, 1);
    let tv = Vocab::build(&dataset, Side::Target, true, 1);
    let mc = ModelConfig::tiny(sv.len(), tv.len());
    let tc = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let ex = trainer::examples(&dataset, &sv, &tv, tc.max_source_length);
    let start = Instant::now();
    let out = trainer::train(&mc, &tc, &ex, &[], &sv, &tv).map_err(err)?;
    Ok((
        Overfit {
            checkpoint: out.best,
            dataset,
        },
        start.elapsed(),
    ))
}

fn overfit(o: &Overfit, took: Duration) -> Check {
    let t = Translator::from_checkpoint(&o.checkpoint, DecodeConfig::default()).map_err(err)?;
    let mut hyps = Vec::new();
    for p in &o.dataset {
        hyps.push(t.translate(&p.source).map_err(err)?);
    }
    let refs: Vec<&str> = o.dataset.iter().map(|p| p.target.as_str()).collect();
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    let rate = exact as f64 / refs.len() as f64;
    let hyp_refs: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let report = metrics::evaluate_lines(&hyp_refs, &refs, false).map_err(err)?;
    ensure(took <= OVERFIT_BUDGET, || format!("training took {took:?}"))?;
    ensure(rate >= OVERFIT_EXACT, || format!("exact match {exact}/{}", refs.len()))?;
    ensure(report.bleu >= OVERFIT_BLEU, || format!("BLEU {:.4}", report.bleu))?;
    ensure(report.rouge_l >= OVERFIT_ROUGE, || format!("ROUGE-L {:.4}", report.rouge_l))?;
    Ok(format!(
        "{OVERFIT_EPOCHS} epochs in {took:.1?}; exact {exact}/{}; BLEU {:.4}; ROUGE-L {:.4}",
        refs.len(),
        report.bleu,
        report.rouge_l
    ))
}

fn checkpoint(o: &Overfit) -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.ckpt");
    o.checkpoint.save(&path).map_err(err)?;
    let back = Checkpoint::load(&path).map_err(err)?;
    let bits = |c: &Checkpoint| -> Vec<(String, Vec<u32>)> {
        c.params
            .iter()
            .map(|(n, m)| (n.to_string(), m.data().iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    ensure(bits(&back) == bits(&o.checkpoint), || "parameters differ after reload".into())?;
    ensure(back.to_bytes().map_err(err)? == o.checkpoint.to_bytes().map_err(err)?, || {
        "re-serialized bytes differ".into()
    })?;

    let before = Translator::from_checkpoint(&o.checkpoint, DecodeConfig::default()).map_err(err)?;
    let after = Translator::from_checkpoint(&back, DecodeConfig::default()).map_err(err)?;
    let words: Vec<&str> = o.dataset.iter().flat_map(|p| p.source.split(' ')).collect();
    let mut rng = SplitMix64::new(99);
    for _ in 0..CHECKPOINT_INPUTS {
        let n = 1 + rng.below(5) as usize;
        let input: Vec<&str> = (0..n).map(|_| words[rng.below(words.len() as u64) as usize]).collect();
        let input = input.join(" ");
        let a = before.hypothesis(&input).map_err(err)?;
        let b = after.hypothesis(&input).map_err(err)?;
        ensure(a.ids == b.ids, || format!("decodes of {input:?} differ"))?;
    }
    Ok(format!("bitwise parameters, identical greedy decodes on {CHECKPOINT_INPUTS} inputs"))
}

// -------------------------------------------------------------- metrics

fn pairs(items: &[(&str, &str)]) -> Vec<EvalPair> {
    items.iter().map(|(h, r)| EvalPair::new(h, r, false)).collect()
}

fn metric_oracles() -> Check {
    let corpus = [
        ("Lịch sử Hà Nội", "Lịch sử Hà Nội"),
        ("Người Việt Nam", "Người Việt Nam"),
        ("Sinh năm 1990", "Sinh năm 1990"),
        ("Thể thao", "Thể thao"),
        ("Âm nhạc Việt Nam theo thể loại", "Âm nhạc Việt Nam theo thể loại"),
    ];
    let same = pairs(&corpus);
    let b = metrics::bleu(&same);
    let r = metrics::rouge_l(&same);
    ensure(b == 1.0, || format!("identical BLEU {b}"))?;
    ensure(r == 1.0, || format!("identical ROUGE-L {r}"))?;
    let expected: f64 = corpus
        .iter()
        .map(|(h, _)| {
            let m = h.split_whitespace().count() as f64;
            1.0 - 0.5 * (1.0 / m).powi(3)
        })
        .sum::<f64>()
        / corpus.len() as f64;
    let me = metrics::meteor(&same);
    ensure((me - expected).abs() <= METEOR_TOL, || format!("identical METEOR {me}, expected {expected}"))?;

    let bp = (1.0f64 - 5.0 / 4.0).exp();
    let bx = metrics::bleu(&pairs(&[("a b c d", "a b c d e")]));
    ensure((bx - BLEU_EXAMPLE).abs() <= BLEU_EXAMPLE_TOL, || format!("BLEU example {bx}"))?;
    ensure((bx - bp).abs() <= 1e-12, || format!("BLEU example {bx} vs brevity penalty {bp}"))?;
    let rx = metrics::rouge_l(&pairs(&[("a b c", "a c")]));
    ensure(rx == 0.8, || format!("ROUGE-L example {rx}"))?;
    Ok(format!("identity 1/1/{me:.9}; BLEU example {bx:.4}; ROUGE-L example {rx}"))
}

// ------------------------------------------------------------- decoding

struct Script(fn(&[u32]) -> Vec<f64>);

impl StepModel for Script {
    fn next_logits(&self, prefix: &[u32]) -> catmt_core::Result<Vec<f64>> {
        Ok((self.0)(prefix))
    }
}

fn trap(p: &[u32]) -> Vec<f64> {
    let ln = f64::ln;
    let ninf = f64::NEG_INFINITY;
    match p {
        [_] => vec![ninf, ninf, ln(0.05), ln(0.05), ln(0.5), ln(0.4)],
        [_, 4] => vec![ninf, ninf, ln(0.25), ln(0.25), ln(0.25), ln(0.25)],
        [_, 5] => vec![ninf, ninf, ln(0.9), ln(0.05), ln(0.025), ln(0.025)],
        _ => vec![ninf, ninf, 0.0, ninf, ninf, ninf],
    }
}

/// Every finished hypothesis reachable under the decoder's stopping rules.
fn enumerate(model: &dyn StepModel, prefix: Vec<u32>, lp: f64, max_len: usize, out: &mut Vec<(Vec<u32>, f64)>) {
    let step = log_softmax_f64(&model.next_logits(&prefix).unwrap());
    for (id, &l) in step.iter().enumerate() {
        if id as u32 == PAD_ID || id as u32 == BOS_ID || l == f64::NEG_INFINITY {
            continue;
        }
        let mut next = prefix.clone();
        next.push(id as u32);
        if id as u32 == EOS_ID || next.len() > max_len {
            out.push((next, lp + l));
        } else {
            enumerate(model, next, lp + l, max_len, out);
        }
    }
}

fn decoding() -> Check {
    let mut rng = SplitMix64::new(55);
    for case in 0..BEAM_CASES {
        let vs = 5 + rng.below(20) as usize;
        let vt = 5 + rng.below(20) as usize;
        let m = Transformer::<f32>::new(ModelConfig::tiny(vs, vt), 3000 + case as u64).map_err(err)?;
        let src: Vec<u32> = (0..1 + rng.below(8)).map(|_| 3 + rng.below(vs as u64 - 3) as u32).collect();
        let cond = Conditioned::new(&m, &src).map_err(err)?;
        let max_len = 1 + rng.below(10) as usize;
        let g = greedy_decode(&cond, max_len).map_err(err)?;
        let cfg = DecodeConfig {
            strategy: Strategy::Beam,
            beam_size: 1,
            max_len,
            ..DecodeConfig::default()
        };
        let b = beam_decode(&cond, &cfg).map_err(err)?;
        ensure(b.len() == 1 && b[0].ids == g.ids, || {
            format!("case {case}: beam {:?} vs greedy {:?}", b.first().map(|h| &h.ids), g.ids)
        })?;
    }

    let max_len = 2;
    let mut all = Vec::new();
    enumerate(&Script(trap), vec![BOS_ID], 0.0, max_len, &mut all);
    let (best_ids, best_lp) = all
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .ok_or("enumeration found nothing")?;
    let greedy = greedy_decode(&Script(trap), max_len).map_err(err)?;
    let cfg = DecodeConfig {
        strategy: Strategy::Beam,
        beam_size: 2,
        max_len,
        length_norm_alpha: 0.0,
    };
    let beam: Vec<Hypothesis> = beam_decode(&Script(trap), &cfg).map_err(err)?;
    ensure(greedy.log_prob < best_lp, || "greedy already finds the best sequence".into())?;
    ensure(beam[0].ids == best_ids, || format!("beam {:?}, exhaustive {best_ids:?}", beam[0].ids))?;
    ensure((beam[0].log_prob - best_lp).abs() < 1e-12, || "beam score differs".into())?;
    Ok(format!(
        "beam=1 equals greedy on {BEAM_CASES} models; trap: greedy p={:.3}, beam=2 p={:.3} matches exhaustive over {} sequences",
        greedy.log_prob.exp(),
        beam[0].log_prob.exp(),
        all.len()
    ))
}

// ---------------------------------------------------------------- split

fn synthetic(n: usize) -> Dataset {
    Dataset::from_pairs((0..n).map(|i| {
        CategoryPair::new(&format!("Category {i}"), &format!("Thể loại {i}"), None).unwrap()
    }))
}

fn split() -> Check {
    let spec = SplitSpec::parse("8:1:1", 42).map_err(err)?;
    let parts = corpus::split(&synthetic(15_000), &spec).map_err(err)?;
    let sizes = (parts.train.len(), parts.valid.len(), parts.test.len());
    ensure(sizes == (12_000, 1_500, 1_500), || format!("sizes {sizes:?}"))?;

    let mut rng = SplitMix64::new(63);
    for _ in 0..SPLIT_SIZES {
        let n = rng.below(3_000) as usize;
        let seed = rng.next_u64();
        let weights = [1 + rng.below(10), rng.below(5), rng.below(5)];
        let spec = SplitSpec::from_weights(weights, seed).map_err(err)?;
        let ds = synthetic(n);
        let a = corpus::split(&ds, &spec).map_err(err)?;
        let b = corpus::split(&ds, &spec).map_err(err)?;
        ensure(a == b, || format!("n={n}: split not deterministic"))?;
        let mut seen = HashSet::new();
        for p in a.train.iter().chain(&a.valid).chain(&a.test) {
            ensure(seen.insert(p.source.clone()), || format!("n={n}: {} in two parts", p.source))?;
        }
        ensure(seen.len() == n, || format!("n={n}: {} pairs after split", seen.len()))?;
        let (tr, va, te) = spec.sizes(n);
        ensure((a.train.len(), a.valid.len(), a.test.len()) == (tr, va, te), || {
            format!("n={n}: sizes differ from the ratio sizes")
        })?;
    }
    Ok(format!("15000 -> {sizes:?}; partition and determinism on {SPLIT_SIZES} sizes"))
}

// ------------------------------------------------------------ harvester

fn record(qid: &str, links: &[(&str, &str)]) -> EntityRecord {
    EntityRecord {
        qid: qid.into(),
        sitelinks: links.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<BTreeMap<_, _>>(),
    }
}

fn harvester_fixtures() -> Check {
    let transport = FixtureTransport::from_dir(data("wikidata")).map_err(err)?;
    let clock = Arc::new(MockClock::new());
    let fetcher = Fetcher::new(&transport, clock.clone(), Duration::ZERO, Duration::ZERO);
    let ids: Vec<String> = (1..=8).map(|i| format!("Q{i}")).collect();
    let records = fetcher.fetch_entities(&QidBatch::new(ids).map_err(err)?).map_err(err)?;
    let accepted: Vec<&str> = records
        .iter()
        .filter(|r| extract_pair(r).is_some())
        .map(|r| r.qid.as_str())
        .collect();
    ensure(accepted == ["Q1", "Q3", "Q6", "Q8"], || format!("accepted {accepted:?}"))?;

    let handmade = [
        (record("Q100", &[("enwiki", "Category:Rivers"), ("viwiki", "Thể loại:Sông")]), true),
        (record("Q101", &[("enwiki", "Category:Rivers")]), false),
        (record("Q102", &[("viwiki", "Thể loại:Sông")]), false),
        (record("Q103", &[("enwiki", "Rivers"), ("viwiki", "Thể loại:Sông")]), false),
        (record("Q104", &[("enwiki", "Category:Rivers"), ("viwiki", "Sông")]), false),
        (record("Q105", &[("enwiki", "Category:Rivers"), ("frwiki", "Catégorie:Cours d'eau")]), false),
        (record("Q106", &[]), false),
    ];
    for (r, want) in &handmade {
        ensure(extract_pair(r).is_some() == *want, || format!("{} accepted={}", r.qid, !want))?;
    }
    let pair = extract_pair(&handmade[0].0).unwrap();
    ensure(pair.source == "Rivers" && pair.target == "Sông", || format!("{pair:?}"))?;

    // dedup: the fixture universe holds three distinct pairs, one of them twice
    let config = HarvestConfig {
        target_count: 10,
        max_qid: 12,
        concurrency: 2,
        min_request_interval: Duration::ZERO,
        backoff_base: Duration::ZERO,
        batch_size: 4,
        attempt_budget: 20,
        ..HarvestConfig::default()
    };
    let out = harvester::harvest(&config, &transport, clock.clone(), Dataset::new()).map_err(err)?;
    ensure(out.dataset.len() == 3, || format!("{} pairs after dedup", out.dataset.len()))?;
    ensure(out.status == HarvestStatus::Shortfall { missing: 7 }, || format!("{:?}", out.status))?;
    let mut d = Dataset::new();
    ensure(d.insert(pair.clone()) && !d.insert(pair), || "duplicate insert accepted".into())?;

    // limiter under virtual time, with concurrent callers
    let interval = Duration::from_millis(500);
    let limiter = Arc::new(RateLimiter::new(Arc::new(MockClock::new()), interval));
    let grants: Vec<Duration> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let l = limiter.clone();
                s.spawn(move || (0..25).map(|_| l.acquire()).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let mut sorted = grants.clone();
    sorted.sort();
    let tightest = sorted.windows(2).map(|w| w[1] - w[0]).min().unwrap();
    ensure(tightest >= interval, || format!("two grants {tightest:?} apart"))?;

    // the fetcher's own requests respect the interval too
    let clock = Arc::new(MockClock::new());
    let paced = Fetcher::new(&transport, clock.clone(), interval, Duration::ZERO);
    for i in 1..=5 {
        paced.fetch_entities(&QidBatch::new(vec![format!("Q{i}")]).map_err(err)?).map_err(err)?;
    }
    let elapsed = clock.now();
    ensure(elapsed >= interval * 4, || format!("5 requests within {elapsed:?}"))?;
    Ok(format!(
        "accepted {accepted:?}; 3 distinct pairs; {} grants at least {tightest:?} apart",
        grants.len()
    ))
}

// ---------------------------------------------------------------- main

fn main() -> ExitCode {
    let mut results: Vec<(&str, Check)> = Vec::new();
    let mut run = |name: &'static str, f: &dyn Fn() -> Check| {
        let r = f();
        match &r {
            Ok(detail) => println!("PASS  {name:<26} {detail}"),
            Err(why) => println!("FAIL  {name:<26} {why}"),
        }
        results.push((name, r));
    };
    run("codec anchors+roundtrip", &codec);
    run("attention correctness", &attention);
    run("gradient check", &gradient_check);
    run("masking", &masking);
    run("loss factorization", &factorization);
    match train_toy() {
        Ok((o, took)) => {
            run("overfit end-to-end", &|| overfit(&o, took));
            run("checkpoint roundtrip", &|| checkpoint(&o));
        }
        Err(e) => {
            run("overfit end-to-end", &|| Err(format!("training failed: {e}")));
            run("checkpoint roundtrip", &|| Err(format!("no trained model: {e}")));
        }
    }
    run("metric oracles", &metric_oracles);
    run("decoding", &decoding);
    run("split", &split);
    run("harvester fixtures", &harvester_fixtures);

    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
