//! Corpus BLEU-4, sentence-averaged ROUGE-L and exact-match METEOR.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vicodec;

/// Floor used in place of a zero clipped n-gram count.
pub const BLEU_EPSILON: f64 = 0.1;
pub const BLEU_MAX_ORDER: usize = 4;

/// Search nodes allowed per pair when looking for the fewest-chunk alignment.
const METEOR_NODE_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    /// Whitespace tokens of both sides, optionally lowercased.
    pub fn new(hypothesis: &str, reference: &str, lowercase: bool) -> Self {
        let toks = |s: &str| {
            s.split_whitespace()
                .map(|t| if lowercase { t.to_lowercase() } else { t.to_owned() })
                .collect()
        };
        Self {
            hypothesis: toks(hypothesis),
            reference: toks(reference),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with uniform weights and brevity penalty
/// `exp(min(0, 1 - r/c))`. A zero clipped count for an order is replaced by
/// [`BLEU_EPSILON`]. Orders for which the hypotheses contain no n-gram at all
/// are left out of the geometric mean.
pub fn bleu(pairs: &[EvalPair]) -> f64 {
    let mut matched = [0usize; BLEU_MAX_ORDER];
    let mut total = [0usize; BLEU_MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        ref_len += p.reference.len();
        for n in 1..=BLEU_MAX_ORDER {
            let refs = ngram_counts(&p.reference, n);
            for (g, c) in ngram_counts(&p.hypothesis, n) {
                matched[n - 1] += c.min(refs.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..BLEU_MAX_ORDER {
        if total[n] == 0 {
            continue;
        }
        let num = if matched[n] == 0 { BLEU_EPSILON } else { matched[n] as f64 };
        log_sum += (num / total[n] as f64).ln();
        orders += 1;
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    bp * (log_sum / orders as f64).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 for one pair.
pub fn rouge_l_pair(p: &EvalPair) -> f64 {
    let l = lcs_len(&p.hypothesis, &p.reference) as f64;
    let prec = if p.hypothesis.is_empty() { 0.0 } else { l / p.hypothesis.len() as f64 };
    let rec = if p.reference.is_empty() { 0.0 } else { l / p.reference.len() as f64 };
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

/// Mean of per-pair ROUGE-L F1.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    mean(pairs.iter().map(rouge_l_pair), pairs.len())
}

/// Matches and chunks of the fewest-chunk maximum exact alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

struct ChunkSearch<'a> {
    /// Reference positions holding the same token, per hypothesis position.
    options: Vec<Vec<usize>>,
    /// Hypothesis positions of each token type may skip at most this many.
    skips_left: HashMap<&'a str, usize>,
    hyp: &'a [String],
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > METEOR_NODE_BUDGET {
            return;
        }
        if i == self.hyp.len() {
            self.best = chunks;
            return;
        }
        // try the continuation of the current chunk first
        let mut opts: Vec<usize> = self.options[i].iter().copied().filter(|&j| !self.used[j]).collect();
        if let Some(p) = prev {
            if let Some(k) = opts.iter().position(|&j| j == p + 1) {
                opts.swap(0, k);
            }
        }
        for j in opts {
            let extra = usize::from(prev.is_none_or(|p| j != p + 1));
            self.used[j] = true;
            self.run(i + 1, Some(j), chunks + extra);
            self.used[j] = false;
        }
        let tok = self.hyp[i].as_str();
        let left = self.skips_left.get(tok).copied().unwrap_or(0);
        if left > 0 {
            self.skips_left.insert(tok, left - 1);
            self.run(i + 1, None, chunks);
            self.skips_left.insert(tok, left);
        }
    }
}

/// One-to-one exact unigram alignment with the maximum number of matches and,
/// among those, the fewest chunks (runs contiguous in both sequences).
pub fn align(hyp: &[String], reference: &[String]) -> Alignment {
    let mut ref_count: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *ref_count.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut hyp_count: HashMap<&str, usize> = HashMap::new();
    for t in hyp {
        *hyp_count.entry(t.as_str()).or_insert(0) += 1;
    }
    let matches = hyp_count
        .iter()
        .map(|(t, &c)| c.min(ref_count.get(t).copied().unwrap_or(0)))
        .sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    let options = hyp
        .iter()
        .map(|t| (0..reference.len()).filter(|&j| &reference[j] == t).collect())
        .collect();
    let skips_left = hyp_count
        .iter()
        .map(|(&t, &c)| (t, c - c.min(ref_count.get(t).copied().unwrap_or(0))))
        .collect();
    let mut search = ChunkSearch {
        options,
        skips_left,
        hyp,
        used: vec![false; reference.len()],
        best: matches + 1,
        nodes: 0,
    };
    search.run(0, None, 0);
    if search.nodes > METEOR_NODE_BUDGET {
        log::warn!("alignment search budget exhausted; chunk count may be above the minimum");
    }
    Alignment {
        matches,
        chunks: search.best.min(matches),
    }
}

/// Exact-match METEOR for one pair:
/// `F_mean · (1 − 0.5·(chunks/m)³)` with `F_mean = 10PR / (R + 9P)`.
pub fn meteor_pair(p: &EvalPair) -> f64 {
    let a = align(&p.hypothesis, &p.reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let prec = m / p.hypothesis.len() as f64;
    let rec = m / p.reference.len() as f64;
    let f_mean = 10.0 * prec * rec / (rec + 9.0 * prec);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// Mean of per-pair METEOR.
pub fn meteor(pairs: &[EvalPair]) -> f64 {
    mean(pairs.iter().map(meteor_pair), pairs.len())
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rouge_l: f64,
    pub bleu: f64,
    pub meteor: f64,
    pub pair_count: usize,
}

impl EvalReport {
    pub fn from_pairs(pairs: &[EvalPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("nothing to evaluate (zero pairs)".into()));
        }
        Ok(Self {
            rouge_l: rouge_l(pairs),
            bleu: bleu(pairs),
            meteor: meteor(pairs),
            pair_count: pairs.len(),
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8}", "metric", "score")?;
        writeln!(f, "{:<8} {:>8.4}", "ROUGE-L", self.rouge_l)?;
        writeln!(f, "{:<8} {:>8.4}", "BLEU", self.bleu)?;
        writeln!(f, "{:<8} {:>8.4}", "METEOR", self.meteor)?;
        write!(f, "{:<8} {:>8}", "pairs", self.pair_count)
    }
}

/// Score hypothesis lines against reference lines. Both sides are passed
/// through the diacritic decoder first, so encoded and readable text score
/// the same.
pub fn evaluate_lines(hyps: &[&str], refs: &[&str], lowercase: bool) -> Result<EvalReport> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypothesis lines but {} reference lines",
            hyps.len(),
            refs.len()
        )));
    }
    let pairs: Vec<EvalPair> = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| EvalPair::new(&vicodec::decode(h), &vicodec::decode(r), lowercase))
        .collect();
    EvalReport::from_pairs(&pairs)
}

pub fn evaluate(hyp_path: impl AsRef<Path>, ref_path: impl AsRef<Path>, lowercase: bool) -> Result<EvalReport> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let hyp = read(hyp_path.as_ref())?;
    let refs = read(ref_path.as_ref())?;
    let h: Vec<&str> = hyp.lines().collect();
    let r: Vec<&str> = refs.lines().collect();
    evaluate_lines(&h, &r, lowercase)
}
