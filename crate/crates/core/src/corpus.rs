//! Parallel category-pair datasets: records, JSONL persistence, seeded
//! splitting and descriptive statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::vicodec;

pub const DEFAULT_SPLIT_SEED: u64 = 42;

/// One aligned English/Vietnamese category name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CategoryPair {
    pub source: String,
    pub target: String,
    pub encoded_target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
}

impl CategoryPair {
    /// Build a pair, trimming both sides and computing the encoded target.
    pub fn new(source: &str, target: &str, qid: Option<String>) -> Result<Self> {
        let source = source.trim();
        let target = target.trim();
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidArgument(
                "category pair needs a non-empty source and target".into(),
            ));
        }
        Ok(Self {
            source: source.to_owned(),
            target: target.to_owned(),
            encoded_target: vicodec::encode(target),
            qid,
        })
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.source.trim().is_empty() || self.target.trim().is_empty() {
            return Err("empty source or target".into());
        }
        let expected = vicodec::encode(&self.target);
        if self.encoded_target != expected {
            return Err(format!(
                "encoded_target {:?} does not match encoding of target ({expected:?})",
                self.encoded_target
            ));
        }
        Ok(())
    }
}

/// Ordered, duplicate-free collection of pairs. Duplicates are judged on
/// `(source, target)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pairs: Vec<CategoryPair>,
    keys: HashSet<(String, String)>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collect pairs, dropping later duplicates.
    pub fn from_pairs(pairs: impl IntoIterator<Item = CategoryPair>) -> Self {
        let mut ds = Self::new();
        for p in pairs {
            ds.insert(p);
        }
        ds
    }

    /// Insert a pair; returns false if an equal `(source, target)` exists.
    pub fn insert(&mut self, pair: CategoryPair) -> bool {
        let key = (pair.source.clone(), pair.target.clone());
        if !self.keys.insert(key) {
            return false;
        }
        self.pairs.push(pair);
        true
    }

    pub fn contains(&self, source: &str, target: &str) -> bool {
        self.keys.contains(&(source.to_owned(), target.to_owned()))
    }

    pub fn pairs(&self) -> &[CategoryPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CategoryPair> {
        self.pairs.iter()
    }

    /// Write one JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a JSONL dataset. Blank lines are ignored; duplicate pairs are
    /// skipped with a warning; any malformed line is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message,
            };
            let pair: CategoryPair =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            pair.validate().map_err(parse_err)?;
            if !ds.insert(pair) {
                log::warn!("{}:{}: duplicate pair skipped", path.display(), n + 1);
            }
        }
        Ok(ds)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a CategoryPair;
    type IntoIter = std::slice::Iter<'a, CategoryPair>;

    fn into_iter(self) -> Self::IntoIter {
        self.pairs.iter()
    }
}

/// An exact non-negative rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::InvalidArgument("ratio with zero denominator".into()));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse ratio component {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Ratio::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if (int.is_empty() && frac.is_empty()) || frac.len() > 18 {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let num = digits.parse().map_err(|_| bad())?;
        Ratio::new(num, 10u64.pow(frac.len() as u32))
    }

    /// `floor(n * self)` without overflow for realistic sizes.
    fn floor_of(&self, n: usize) -> usize {
        ((n as u128 * self.num as u128) / self.den as u128) as usize
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Train/validation/test proportions plus the shuffle seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    ratios: [Ratio; 3],
    pub seed: u64,
}

impl SplitSpec {
    /// Proportions must sum to exactly one.
    pub fn new(ratios: [Ratio; 3], seed: u64) -> Result<Self> {
        let (mut num, mut den) = (0u128, 1u128);
        for r in ratios {
            num = num * r.den as u128 + r.num as u128 * den;
            den *= r.den as u128;
        }
        if num != den {
            return Err(Error::InvalidArgument(format!(
                "split ratios sum to {num}/{den}, expected 1"
            )));
        }
        Ok(Self { ratios, seed })
    }

    /// Integer weights, normalized by their total (e.g. 8:1:1).
    pub fn from_weights(weights: [u64; 3], seed: u64) -> Result<Self> {
        let total: u64 = weights.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("split weights are all zero".into()));
        }
        let ratios = [
            Ratio::new(weights[0], total)?,
            Ratio::new(weights[1], total)?,
            Ratio::new(weights[2], total)?,
        ];
        Self::new(ratios, seed)
    }

    /// Parse `a:b:c` (or comma separated). All-integer components are
    /// weights; otherwise components are decimals or fractions that must sum
    /// to one.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = text.split([':', ',']).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected three split ratios, got {text:?}"
            )));
        }
        if parts
            .iter()
            .all(|p| !p.trim().is_empty() && p.trim().bytes().all(|b| b.is_ascii_digit()))
        {
            let w = |p: &str| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::InvalidArgument(e.to_string()))
            };
            return Self::from_weights([w(parts[0])?, w(parts[1])?, w(parts[2])?], seed);
        }
        Self::new(
            [
                Ratio::parse(parts[0])?,
                Ratio::parse(parts[1])?,
                Ratio::parse(parts[2])?,
            ],
            seed,
        )
    }

    pub fn ratios(&self) -> [Ratio; 3] {
        self.ratios
    }

    /// Partition sizes for `n` items: validation and test are floored, the
    /// remainder goes to training.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = self.ratios[1].floor_of(n);
        let test = self.ratios[2].floor_of(n);
        (n - val - test, val, test)
    }
}

/// The three parts of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Shuffle with the split's seed, then cut into contiguous train/valid/test runs.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    SplitMix64::new(spec.seed).shuffle(&mut order);
    let (n_train, n_val, _) = spec.sizes(dataset.len());
    let take = |range: std::ops::Range<usize>| {
        Dataset::from_pairs(order[range].iter().map(|&i| dataset.pairs[i].clone()))
    };
    Ok(Split {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_val),
        test: take(n_train + n_val..dataset.len()),
    })
}

/// Which half of a pair to look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// Whitespace token counts for one side, optionally case-folded.
pub fn word_counts(
    dataset: &Dataset,
    side: Side,
    case_sensitive: bool,
) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for p in dataset {
        let text = match side {
            Side::Source => &p.source,
            Side::Target => &p.target,
        };
        for tok in text.split_whitespace() {
            let tok = if case_sensitive {
                tok.to_owned()
            } else {
                tok.to_lowercase()
            };
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus description in the shape of the dataset analysis table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub source_tokens: usize,
    pub target_tokens: usize,
    pub vocab_source_sensitive: usize,
    pub vocab_target_sensitive: usize,
    pub vocab_source_insensitive: usize,
    pub vocab_target_insensitive: usize,
    pub top_source_words: Vec<(String, usize)>,
    pub top_target_words: Vec<(String, usize)>,
    pub rare_source_words: Vec<(String, usize)>,
    pub rare_target_words: Vec<(String, usize)>,
}

/// Compute [`CorpusStats`]. Word lists are case-folded; ties are broken
/// lexicographically.
pub fn analyze(dataset: &Dataset, k: usize) -> Result<CorpusStats> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let max_len = |f: fn(&CategoryPair) -> &str| {
        dataset
            .iter()
            .map(|p| f(p).split_whitespace().count())
            .max()
            .unwrap_or(0)
    };
    let src_sensitive = word_counts(dataset, Side::Source, true);
    let tgt_sensitive = word_counts(dataset, Side::Target, true);
    let src_folded = word_counts(dataset, Side::Source, false);
    let tgt_folded = word_counts(dataset, Side::Target, false);

    Ok(CorpusStats {
        pairs: dataset.len(),
        max_source_len: max_len(|p| &p.source),
        max_target_len: max_len(|p| &p.target),
        source_tokens: src_sensitive.values().sum(),
        target_tokens: tgt_sensitive.values().sum(),
        vocab_source_sensitive: src_sensitive.len(),
        vocab_target_sensitive: tgt_sensitive.len(),
        vocab_source_insensitive: src_folded.len(),
        vocab_target_insensitive: tgt_folded.len(),
        top_source_words: ranked(&src_folded, k, true),
        top_target_words: ranked(&tgt_folded, k, true),
        rare_source_words: ranked(&src_folded, k, false),
        rare_target_words: ranked(&tgt_folded, k, false),
    })
}

fn ranked(counts: &BTreeMap<String, usize>, k: usize, most_common: bool) -> Vec<(String, usize)> {
    let mut items: Vec<(String, usize)> = counts.iter().map(|(w, &c)| (w.clone(), c)).collect();
    if most_common {
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    } else {
        items.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    }
    items.truncate(k);
    items
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words = |v: &[(String, usize)]| {
            v.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(", ")
        };
        let rows: [(&str, String); 13] = [
            ("Pairs", self.pairs.to_string()),
            ("Maximum length of sources", self.max_source_len.to_string()),
            ("Maximum length of targets", self.max_target_len.to_string()),
            ("Source tokens", self.source_tokens.to_string()),
            ("Target tokens", self.target_tokens.to_string()),
            ("Vocabulary size in sources (sensitive)", self.vocab_source_sensitive.to_string()),
            ("Vocabulary size in targets (sensitive)", self.vocab_target_sensitive.to_string()),
            ("Vocabulary size in sources (insensitive)", self.vocab_source_insensitive.to_string()),
            ("Vocabulary size in targets (insensitive)", self.vocab_target_insensitive.to_string()),
            ("Popular words in sources", words(&self.top_source_words)),
            ("Popular words in targets", words(&self.top_target_words)),
            ("Rare words in sources", words(&self.rare_source_words)),
            ("Rare words in targets", words(&self.rare_target_words)),
        ];
        let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<width$}  {v}")?;
        }
        Ok(())
    }
}
