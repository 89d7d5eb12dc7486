//! Vocabulary, tokenization, synthetic tasks, TSV corpora, and batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const DEFAULT_MAX_LEN: usize = 128;

/// Token ↔ id bijection with the four reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Ranks whitespace tokens by descending frequency, ties lexicographically,
    /// keeps at most `max_size` of them after the reserved entries.
    pub fn build<'a, I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<str> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size).map(|(t, _)| t.to_string()))
            .collect::<Vec<_>>();
        Ok(Vocabulary::from(tokens))
    }

    /// Vocabulary whose content tokens are the decimal ids `4..size`.
    pub fn numeric(size: usize) -> Self {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain((RESERVED.len()..size).map(|i| i.to_string()))
            .collect::<Vec<_>>();
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Joins tokens, dropping reserved markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Source ends with EOS; target is `BOS … EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl SentencePair {
    /// Wraps raw content ids with the reserved markers.
    pub fn from_content(src: &[u32], tgt: &[u32]) -> Self {
        let mut s = src.to_vec();
        s.push(EOS);
        let mut t = Vec::with_capacity(tgt.len() + 2);
        t.push(BOS);
        t.extend_from_slice(tgt);
        t.push(EOS);
        SentencePair { src: s, tgt: t }
    }

    /// Number of predicted target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt.len() - 1
    }

    /// Reference for decoding: target without BOS, with EOS.
    pub fn reference(&self) -> &[u32] {
        &self.tgt[1..]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Copy, Task::Reverse, Task::Sort];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| format!("unknown task `{s}`; valid tasks: copy, reverse, sort"))
    }
}

/// Deterministic synthetic pairs over content ids `4..vocab_size`.
pub fn gen_synthetic(
    task: Task,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    if vocab_size <= RESERVED.len() {
        return Err(Error::Parameter(format!(
            "vocab_size must be at least {}, got {vocab_size}",
            RESERVED.len() + 1
        )));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Parameter(format!(
            "need 1 <= min_len <= max_len, got {min_len}..{max_len}"
        )));
    }
    let mut rng = derive(seed, Stream::Synthetic, task as u64);
    let lo = RESERVED.len() as u32;
    let hi = vocab_size as u32;
    Ok((0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
            let tgt = apply_task(task, &src);
            SentencePair::from_content(&src, &tgt)
        })
        .collect())
}

pub fn apply_task(task: Task, src: &[u32]) -> Vec<u32> {
    let mut t = src.to_vec();
    match task {
        Task::Copy => {}
        Task::Reverse => t.reverse(),
        Task::Sort => t.sort_unstable(),
    }
    t
}

/// Writes pairs as `source\ttarget` lines of vocabulary tokens.
pub fn write_tsv(path: &Path, pairs: &[SentencePair], vocab: &Vocabulary) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        writeln!(out, "{}\t{}", vocab.decode(&p.src), vocab.decode(&p.tgt))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub vocab: Vocabulary,
    /// Lines dropped for exceeding `max_len`.
    pub skipped: usize,
}

/// Raw `(source, target)` lines of a TSV file, validated.
pub fn read_tsv_lines(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} contains no sentence pairs", path.display())));
    }
    Ok(out)
}

/// Encodes lines with `vocab`; pairs longer than `max_len` (with markers) are skipped.
pub fn encode_pairs(lines: &[(String, String)], vocab: &Vocabulary, max_len: usize) -> (Vec<SentencePair>, usize) {
    let mut pairs = Vec::with_capacity(lines.len());
    let mut skipped = 0;
    for (s, t) in lines {
        let p = SentencePair::from_content(&vocab.encode(s), &vocab.encode(t));
        if p.src.len() > max_len || p.tgt.len() > max_len || p.src.len() < 2 || p.tgt.len() < 3 {
            skipped += 1;
        } else {
            pairs.push(p);
        }
    }
    (pairs, skipped)
}

/// Reads a TSV corpus and builds one joint source/target vocabulary from it.
pub fn load_tsv(path: &Path, max_len: usize, max_vocab: usize) -> Result<Corpus> {
    let lines = read_tsv_lines(path)?;
    let vocab = Vocabulary::build(lines.iter().flat_map(|(s, t)| [s, t]), max_vocab)?;
    let (pairs, skipped) = encode_pairs(&lines, &vocab, max_len);
    if pairs.is_empty() {
        return Err(Error::Data(format!("every line of {} exceeds max_len {max_len}", path.display())));
    }
    Ok(Corpus { pairs, vocab, skipped })
}

/// Right-padded id matrix `[batch × len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSeqs {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedSeqs {
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Self {
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            let r = r.as_ref();
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat(PAD).take(len - r.len()));
        }
        PaddedSeqs {
            ids,
            batch: rows.len(),
            len,
        }
    }

    pub fn single(ids: &[u32]) -> Self {
        Self::from_rows(&[ids])
    }

    /// True at pad cells.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i == PAD).collect()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: PaddedSeqs,
    /// Target shifted right: starts with BOS.
    pub tgt_in: PaddedSeqs,
    /// Target to predict: ends with EOS.
    pub tgt_out: PaddedSeqs,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let src: Vec<&[u32]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let tin: Vec<&[u32]> = pairs.iter().map(|p| &p.tgt[..p.tgt.len() - 1]).collect();
        let tout: Vec<&[u32]> = pairs.iter().map(|p| &p.tgt[1..]).collect();
        Batch {
            src: PaddedSeqs::from_rows(&src),
            tgt_in: PaddedSeqs::from_rows(&tin),
            tgt_out: PaddedSeqs::from_rows(&tout),
        }
    }

    pub fn size(&self) -> usize {
        self.src.batch
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.non_pad()
    }
}

/// Length-bucketed batches of at most `batch_tokens` padded target cells,
/// returned in a seeded random order.
pub fn make_batches(pairs: &[SentencePair], batch_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Data("no sentence pairs to batch".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut derive(seed, Stream::Batching, 0));
    order.sort_by_key(|&i| (pairs[i].target_tokens(), pairs[i].src.len()));
    let mut batches = Vec::new();
    let mut current: Vec<&SentencePair> = Vec::new();
    let mut width = 0;
    for i in order {
        let p = &pairs[i];
        let t = p.target_tokens();
        if t > batch_tokens {
            return Err(Error::Data(format!(
                "pair {i} has {t} target tokens, more than the batch budget {batch_tokens}"
            )));
        }
        let new_width = width.max(t);
        if !current.is_empty() && new_width * (current.len() + 1) > batch_tokens {
            batches.push(Batch::from_pairs(&current));
            current.clear();
            width = t;
        } else {
            width = new_width;
        }
        current.push(p);
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(&current));
    }
    batches.shuffle(&mut derive(seed, Stream::Batching, 1));
    Ok(batches)
}
