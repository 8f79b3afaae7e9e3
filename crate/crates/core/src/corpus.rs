//! Parallel corpora: vocabularies, the seeded synthetic generator, TSV I/O
//! and train/dev/test splitting.
//!
//! # Synthetic generator
//!
//! The generator draws everything from one [`SplitMix64`] stream seeded with
//! the corpus seed, in this order:
//!
//! 1. Word classes over the source vocabulary `s0..s{V-1}`: a shuffled
//!    permutation picks `round(fertility_rate * V)` words that translate to
//!    two target tokens (`t{k}a t{k}b`); a second permutation picks
//!    `round(swap_probability * V)` *modifier* words; then
//!    `round(merge_rate * V)` distinct ordered bigrams of fertility-1 words
//!    are designated to translate to a single token `m{n}`.
//! 2. For each pair, a length `L` uniform in `[min_len, max_len]`, then
//!    source words left to right: with probability `merge_rate` (when a
//!    bigram still fits) a designated bigram is planted, otherwise a word is
//!    drawn uniformly.
//! 3. Translation is a deterministic function of the source. The source is
//!    cut left to right into units (a designated bigram or a single word),
//!    each unit is translated, and a modifier unit is swapped with the unit
//!    that follows it when both are single fertility-1 words. The reordering
//!    depends only on word classes so the mapping stays learnable.
//!
//! Gold links are 1-based `(target, source)` pairs.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word vocabulary with the four reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push_unchecked(t);
        }
        v
    }

    /// Rebuilds a vocabulary from its full token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(a, b)| a != b)
        {
            return Err(Error::Data(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let mut v = Vocab::new();
        for t in &tokens[RESERVED.len()..] {
            if v.index.contains_key(t) {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
            v.push_unchecked(t);
        }
        Ok(v)
    }

    fn push_unchecked(&mut self, token: &str) -> u32 {
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Id of `token`, inserting it if new. Reserved spellings are never
    /// inserted as corpus tokens; they map to their reserved ids.
    pub fn add(&mut self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) => id,
            None => self.push_unchecked(token),
        }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &str) -> Vec<u32> {
        split_words(words).map(|w| self.id_or_unk(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Splits on ASCII spaces, dropping empty fields.
pub fn split_words(line: &str) -> impl Iterator<Item = &str> {
    line.split(' ').filter(|w| !w.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// 1-based `(target, source)` links.
    pub gold_alignment: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub size: usize,
    pub vocab_size: usize,
    pub fertility_rate: f64,
    pub merge_rate: f64,
    pub swap_probability: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            size: 6000,
            vocab_size: 40,
            fertility_rate: 0.1,
            merge_rate: 0.05,
            swap_probability: 0.15,
            min_len: 5,
            max_len: 14,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::config("vocab_size", "must be at least 8"));
        }
        for (name, v) in [
            ("fertility_rate", self.fertility_rate),
            ("merge_rate", self.merge_rate),
            ("swap_probability", self.swap_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, format!("{v} is outside [0, 1]")));
            }
        }
        if self.min_len < 2 {
            return Err(Error::config("min_len", "must be at least 2"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("max_len", "must be >= min_len"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<ParallelPair>,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub seed: u64,
    pub generator_params: Option<GeneratorParams>,
    /// Lines dropped on load because one side was empty.
    pub skipped: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn with_pairs(&self, pairs: Vec<ParallelPair>) -> Corpus {
        Corpus {
            pairs,
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            seed: self.seed,
            generator_params: self.generator_params,
            skipped: 0,
        }
    }

    /// Longest source or target side, in tokens.
    pub fn max_sentence_len(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.source.len().max(p.target.len()))
            .max()
            .unwrap_or(0)
    }

    /// Writes `source<TAB>target` lines.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&self.source_vocab.decode(&p.source));
            out.push('\t');
            out.push_str(&self.target_vocab.decode(&p.target));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the gold links, one line per pair, as space-separated `i-j`
    /// (1-based target index, 1-based source index).
    pub fn write_alignments(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for p in &self.pairs {
            let line = p
                .gold_alignment
                .as_deref()
                .unwrap_or(&[])
                .iter()
                .map(|(i, j)| format!("{i}-{j}"))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads an alignment sidecar written by [`Corpus::write_alignments`].
pub fn read_alignments(path: &Path) -> Result<Vec<Vec<(usize, usize)>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            split_words(line)
                .map(|link| {
                    let parsed = link
                        .split_once('-')
                        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
                    parsed.ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        reason: format!("bad link {link:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Unit {
    Word { src: usize, word: usize },
    Merge { src: usize, bigram: usize },
}

struct Lexicon {
    fertile: Vec<bool>,
    modifier: Vec<bool>,
    /// Words that may be drawn on their own.
    free: Vec<usize>,
    bigrams: Vec<(usize, usize)>,
    bigram_index: HashMap<(usize, usize), usize>,
    word_target: Vec<Vec<u32>>,
    bigram_target: Vec<u32>,
}

fn count_of(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).min(n)
}

fn build_lexicon(
    params: &GeneratorParams,
    rng: &mut SplitMix64,
    source_vocab: &mut Vocab,
    target_vocab: &mut Vocab,
) -> Lexicon {
    let v = params.vocab_size;
    for k in 0..v {
        source_vocab.add(&format!("s{k}"));
    }

    let mut order: Vec<usize> = (0..v).collect();
    rng.shuffle(&mut order);
    let mut fertile = vec![false; v];
    for &k in &order[..count_of(params.fertility_rate, v)] {
        fertile[k] = true;
    }

    let mut order: Vec<usize> = (0..v).collect();
    rng.shuffle(&mut order);
    let mut modifier = vec![false; v];
    for &k in &order[..count_of(params.swap_probability, v)] {
        modifier[k] = true;
    }

    // Merge bigrams are fixed phrases: the head word never occurs without
    // its partner, so the merged token is known once the head is read.
    let mut simple: Vec<usize> = (0..v).filter(|&k| !fertile[k] && !modifier[k]).collect();
    rng.shuffle(&mut simple);
    let wanted = count_of(params.merge_rate, v).min(simple.len() / 2);
    let mut bound = vec![false; v];
    let mut bigrams = Vec::new();
    let mut bigram_index = HashMap::new();
    for n in 0..wanted {
        let (a, b) = (simple[2 * n], simple[2 * n + 1]);
        bound[a] = true;
        bigram_index.insert((a, b), n);
        bigrams.push((a, b));
    }

    let word_target = (0..v)
        .map(|k| {
            if fertile[k] {
                vec![
                    target_vocab.add(&format!("t{k}a")),
                    target_vocab.add(&format!("t{k}b")),
                ]
            } else {
                vec![target_vocab.add(&format!("t{k}"))]
            }
        })
        .collect();
    let bigram_target = (0..bigrams.len())
        .map(|n| target_vocab.add(&format!("m{n}")))
        .collect();

    Lexicon {
        fertile,
        modifier,
        free: (0..v).filter(|&k| !bound[k]).collect(),
        bigrams,
        bigram_index,
        word_target,
        bigram_target,
    }
}

impl Lexicon {
    fn translate(&self, source: &[usize]) -> (Vec<u32>, Vec<(usize, usize)>) {
        let mut units = Vec::new();
        let mut k = 0;
        while k < source.len() {
            if k + 1 < source.len() {
                if let Some(&b) = self.bigram_index.get(&(source[k], source[k + 1])) {
                    units.push(Unit::Merge { src: k, bigram: b });
                    k += 2;
                    continue;
                }
            }
            units.push(Unit::Word {
                src: k,
                word: source[k],
            });
            k += 1;
        }

        let swappable = |u: &Unit| matches!(u, Unit::Word { word, .. } if !self.fertile[*word]);
        let mut u = 0;
        while u + 1 < units.len() {
            let is_modifier = matches!(units[u], Unit::Word { word, .. } if self.modifier[word]);
            if is_modifier && swappable(&units[u]) && swappable(&units[u + 1]) {
                units.swap(u, u + 1);
                u += 2;
            } else {
                u += 1;
            }
        }

        let mut target = Vec::new();
        let mut links = Vec::new();
        for unit in units {
            match unit {
                Unit::Word { src, word } => {
                    for &t in &self.word_target[word] {
                        target.push(t);
                        links.push((target.len(), src + 1));
                    }
                }
                Unit::Merge { src, bigram } => {
                    target.push(self.bigram_target[bigram]);
                    links.push((target.len(), src + 1));
                    links.push((target.len(), src + 2));
                }
            }
        }
        (target, links)
    }
}

/// Generates a synthetic parallel corpus with gold alignments. Pure in
/// `(params, seed)`.
pub fn generate_synthetic(params: &GeneratorParams, seed: u64) -> Result<Corpus> {
    params.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut source_vocab = Vocab::new();
    let mut target_vocab = Vocab::new();
    let lex = build_lexicon(params, &mut rng, &mut source_vocab, &mut target_vocab);
    let source_id = |k: usize| (k + RESERVED.len()) as u32;

    let mut pairs = Vec::with_capacity(params.size);
    for _ in 0..params.size {
        let len = rng.range_inclusive(params.min_len, params.max_len);
        let mut words = Vec::with_capacity(len);
        while words.len() < len {
            if !lex.bigrams.is_empty() && words.len() + 2 <= len && rng.bernoulli(params.merge_rate)
            {
                let (a, b) = lex.bigrams[rng.below(lex.bigrams.len())];
                words.push(a);
                words.push(b);
            } else {
                words.push(lex.free[rng.below(lex.free.len())]);
            }
        }
        let (target, links) = lex.translate(&words);
        pairs.push(ParallelPair {
            source: words.into_iter().map(source_id).collect(),
            target,
            gold_alignment: Some(links),
        });
    }

    Ok(Corpus {
        pairs,
        source_vocab,
        target_vocab,
        seed,
        generator_params: Some(*params),
        skipped: 0,
    })
}

/// Loads `source<TAB>target` lines, building vocabularies from the data.
pub fn load_tsv(path: &Path, max_pairs: Option<usize>) -> Result<Corpus> {
    read_tsv(path, max_pairs, None)
}

/// Loads a TSV file against fixed vocabularies; unknown words map to UNK.
pub fn load_tsv_with_vocab(
    path: &Path,
    max_pairs: Option<usize>,
    source_vocab: &Vocab,
    target_vocab: &Vocab,
) -> Result<Corpus> {
    read_tsv(path, max_pairs, Some((source_vocab, target_vocab)))
}

fn read_tsv(path: &Path, max_pairs: Option<usize>, fixed: Option<(&Vocab, &Vocab)>) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("not valid UTF-8: {e}"),
    })?;
    let (mut sv, mut tv) = match fixed {
        Some((s, t)) => (s.clone(), t.clone()),
        None => (Vocab::new(), Vocab::new()),
    };
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (n, line) in text.lines().enumerate() {
        if max_pairs.is_some_and(|m| pairs.len() >= m) {
            break;
        }
        let line = line.strip_suffix('\r').unwrap_or(line);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let src: Vec<&str> = split_words(fields[0]).collect();
        let tgt: Vec<&str> = split_words(fields[1]).collect();
        if src.is_empty() || tgt.is_empty() {
            skipped += 1;
            continue;
        }
        let (source, target) = if fixed.is_some() {
            (
                src.iter().map(|w| sv.id_or_unk(w)).collect(),
                tgt.iter().map(|w| tv.id_or_unk(w)).collect(),
            )
        } else {
            (
                src.iter().map(|w| sv.add(w)).collect(),
                tgt.iter().map(|w| tv.add(w)).collect(),
            )
        };
        pairs.push(ParallelPair {
            source,
            target,
            gold_alignment: None,
        });
    }
    Ok(Corpus {
        pairs,
        source_vocab: sv,
        target_vocab: tv,
        seed: 0,
        generator_params: None,
        skipped,
    })
}

/// Shuffles with `seed` and cuts into train/dev/test. Sizes are
/// `round(f_train * n)`, `round(f_dev * n)` and the remainder.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (a, b, c) = fractions;
    for (name, f) in [("train", a), ("dev", b), ("test", c)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::config(
                format!("fractions.{name}"),
                format!("{f} is outside [0, 1]"),
            ));
        }
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "fractions",
            format!("sum to {} instead of 1", a + b + c),
        ));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| corpus.with_pairs(idx.iter().map(|&k| corpus.pairs[k].clone()).collect());
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_dev]),
        take(&order[n_train + n_dev..]),
    ))
}

/// True when some pair of links crosses (`i < i'` but `j > j'`).
pub fn has_crossing(links: &[(usize, usize)]) -> bool {
    let set: HashSet<_> = links.iter().collect();
    links
        .iter()
        .any(|&(i, j)| set.iter().any(|&&(i2, j2)| i < i2 && j > j2))
}
