//! Greedy and beam decoding over the mixture distribution, with layer pruning.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{PaddedSeqs, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::argmax;

pub const DEFAULT_BEAM: usize = 8;
pub const DEFAULT_LENGTH_PENALTY: f64 = 1.0;
/// Sentences decoded together by [`translate`] in greedy mode.
pub const GREEDY_CHUNK: usize = 64;

/// Inclusive 1-based decoder-group range `a:b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRange {
    pub first: usize,
    pub last: usize,
}

impl FromStr for GroupRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("decoder group range must look like a:b with 1 <= a <= b, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let first: usize = a.trim().parse().map_err(|_| bad())?;
        let last: usize = b.trim().parse().map_err(|_| bad())?;
        if first == 0 || first > last {
            return Err(bad());
        }
        Ok(GroupRange { first, last })
    }
}

impl std::fmt::Display for GroupRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.first, self.last)
    }
}

/// Which layers take part at inference time. `Default` runs everything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Run only the bottom `k` encoder layers.
    pub encoder_keep: Option<usize>,
    /// Mix only the distributions of decoder groups `a..=b`.
    pub decoder_groups: Option<GroupRange>,
}

/// A model restricted by a validated [`PruneSpec`].
#[derive(Clone, Debug)]
pub struct PrunedModel<'a, F> {
    pub model: &'a Model<F>,
    keep: Option<usize>,
    groups: Option<Range<usize>>,
}

pub fn apply_prune<F: Scalar>(model: &Model<F>, spec: PruneSpec) -> Result<PrunedModel<'_, F>> {
    let cfg = model.config();
    if let Some(k) = spec.encoder_keep {
        model.enc_scheme().truncate(k)?;
    }
    let groups = match spec.decoder_groups {
        None => None,
        Some(r) => {
            let n = cfg.prediction_groups();
            if r.last > n {
                return Err(Error::Parameter(format!(
                    "decoder group range {r} exceeds the model's {n} groups"
                )));
            }
            Some(r.first - 1..r.last)
        }
    };
    Ok(PrunedModel {
        model,
        keep: spec.encoder_keep,
        groups,
    })
}

impl<'a, F: Scalar> PrunedModel<'a, F> {
    pub fn encode(&self, tape: &mut Tape<F>, src: &PaddedSeqs) -> Result<EncoderOutput> {
        self.model.encode(tape, src, self.keep)
    }

    /// Mixture log-probabilities `[rows × V]` for `tgt_in` given an encoder
    /// output already computed on this tape.
    pub fn fused_log_probs(&self, tape: &mut Tape<F>, tgt_in: &PaddedSeqs, enc: &EncoderOutput) -> Result<Vec<F>> {
        let pred = self.model.decode(tape, tgt_in, enc, self.groups.clone())?;
        Ok(pred.fused_log_probs(tape))
    }

    /// Mixture probabilities `[rows × V]`, checked for normalization.
    pub fn fused_probs(&self, src: &PaddedSeqs, tgt_in: &PaddedSeqs) -> Result<Tensor<F>> {
        let mut tape = Tape::eval();
        let enc = self.encode(&mut tape, src)?;
        let pred = self.model.decode(&mut tape, tgt_in, &enc, self.groups.clone())?;
        pred.fused_probs(&tape)
    }

    /// ψ over the selected groups.
    pub fn psi(&self) -> Vec<f64> {
        let mut tape = Tape::<F>::eval();
        let src = PaddedSeqs::single(&[EOS]);
        let tgt = PaddedSeqs::single(&[BOS]);
        let enc = self.encode(&mut tape, &src).expect("validated spec");
        let pred = self
            .model
            .decode(&mut tape, &tgt, &enc, self.groups.clone())
            .expect("validated spec");
        pred.psi(&tape).iter().map(|p| p.as_f64()).collect()
    }
}

/// Encoder output moved onto a fresh tape as a constant, with each batch
/// row repeated `times` times.
fn detached<F: Scalar>(src_tape: &Tape<F>, enc: &EncoderOutput, times: usize) -> Frozen<F> {
    let v = src_tape.value(enc.fused);
    let d = v.last_dim();
    let mut data = Vec::with_capacity(v.len() * times);
    let mut key_pad = Vec::with_capacity(enc.key_pad.len() * times);
    for b in 0..enc.batch {
        let rows = &v.data()[b * enc.len * d..(b + 1) * enc.len * d];
        let pad = &enc.key_pad[b * enc.len..(b + 1) * enc.len];
        for _ in 0..times {
            data.extend_from_slice(rows);
            key_pad.extend_from_slice(pad);
        }
    }
    Frozen {
        value: Tensor::new(vec![enc.batch * times * enc.len, d], data).expect("consistent shape"),
        batch: enc.batch * times,
        len: enc.len,
        key_pad,
    }
}

struct Frozen<F> {
    value: Tensor<F>,
    batch: usize,
    len: usize,
    key_pad: Vec<bool>,
}

impl<F: Scalar> Frozen<F> {
    fn on(&self, tape: &mut Tape<F>) -> Result<EncoderOutput> {
        Ok(EncoderOutput {
            layers: Vec::new(),
            fused: tape.constant(self.value.clone())?,
            batch: self.batch,
            len: self.len,
            key_pad: self.key_pad.clone(),
        })
    }

    /// Keeps only the batch rows listed in `rows`.
    fn select(&self, rows: &[usize]) -> Self {
        let d = self.value.last_dim();
        let stride = self.len * d;
        let mut data = Vec::with_capacity(rows.len() * stride);
        let mut key_pad = Vec::with_capacity(rows.len() * self.len);
        for &b in rows {
            data.extend_from_slice(&self.value.data()[b * stride..(b + 1) * stride]);
            key_pad.extend_from_slice(&self.key_pad[b * self.len..(b + 1) * self.len]);
        }
        Frozen {
            value: Tensor::new(vec![rows.len() * self.len, d], data).expect("consistent shape"),
            batch: rows.len(),
            len: self.len,
            key_pad,
        }
    }
}

/// Decoded tokens (no BOS; ends with EOS when finished) and their log-probability
/// under the mixture distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `log P / len^lp`.
    pub fn score(&self, length_penalty: f64) -> f64 {
        self.log_prob / (self.tokens.len().max(1) as f64).powf(length_penalty)
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn check_sources(sources: &[Vec<u32>], max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::Parameter("max_len must be at least 1".into()));
    }
    if sources.iter().any(|s| s.is_empty()) {
        return Err(Error::Data("empty source sentence".into()));
    }
    Ok(())
}

/// Argmax decoding of each source (ids ending in EOS) until EOS or `max_len`
/// generated tokens. Ties go to the smaller token id; `<pad>` and `<s>` are
/// never emitted.
pub fn greedy_decode<F: Scalar>(
    model: &PrunedModel<'_, F>,
    sources: &[Vec<u32>],
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    check_sources(sources, max_len)?;
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::eval();
    let enc = model.encode(&mut tape, &PaddedSeqs::from_rows(sources))?;
    let mut frozen = detached(&tape, &enc, 1);
    drop(tape);
    let mut hyps: Vec<Hypothesis> = sources
        .iter()
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        })
        .collect();
    let mut alive: Vec<usize> = (0..sources.len()).collect();
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = alive
            .iter()
            .map(|&i| std::iter::once(BOS).chain(hyps[i].tokens.iter().copied()).collect())
            .collect();
        let mut tape = Tape::eval();
        let enc = frozen.on(&mut tape)?;
        let lp = model.fused_log_probs(&mut tape, &PaddedSeqs::from_rows(&prefixes), &enc)?;
        let v = model.model.config().tgt_vocab;
        let mut still = Vec::with_capacity(alive.len());
        for (row, &i) in alive.iter().enumerate() {
            let r = row * (step + 1) + step;
            let dist = &lp[r * v..(r + 1) * v];
            let t = EOS as usize + argmax(&dist[EOS as usize..]);
            let h = &mut hyps[i];
            h.tokens.push(t as u32);
            h.log_prob += dist[t].as_f64();
            if t as u32 == EOS {
                h.finished = true;
            } else {
                still.push(row);
            }
        }
        if still.is_empty() {
            break;
        }
        if still.len() < alive.len() {
            frozen = frozen.select(&still);
            alive = still.iter().map(|&r| alive[r]).collect();
        }
    }
    Ok(hyps)
}

/// Beam search with cumulative mixture log-probabilities. Candidates are
/// ranked by score, then token id, then parent beam; the result maximizes
/// `log P / len^length_penalty` over finished and length-capped hypotheses.
/// Search stops once no live beam can overtake the best finished one.
pub fn beam_search<F: Scalar>(
    model: &PrunedModel<'_, F>,
    source: &[u32],
    width: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::Parameter("beam width must be at least 1".into()));
    }
    if !(length_penalty >= 0.0) {
        return Err(Error::Parameter(format!("length penalty must be >= 0, got {length_penalty}")));
    }
    check_sources(std::slice::from_ref(&source.to_vec()), max_len)?;
    let v = model.model.config().tgt_vocab;
    let mut tape = Tape::eval();
    let enc = model.encode(&mut tape, &PaddedSeqs::single(source))?;
    let base = detached(&tape, &enc, 1);
    drop(tape);
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = beams
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let frozen = base.select(&vec![0; beams.len()]);
        let mut tape = Tape::eval();
        let enc = frozen.on(&mut tape)?;
        let lp = model.fused_log_probs(&mut tape, &PaddedSeqs::from_rows(&prefixes), &enc)?;
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(beams.len() * v);
        for (b, h) in beams.iter().enumerate() {
            let r = b * (step + 1) + step;
            for (t, &l) in lp[r * v..(r + 1) * v].iter().enumerate().skip(EOS as usize) {
                cands.push((h.log_prob + l.as_f64(), t as u32, b));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        // the top `width` candidates survive; those ending in EOS finish
        let mut next = Vec::with_capacity(width);
        for &(score, t, b) in cands.iter().take(width) {
            let mut tokens = beams[b].tokens.clone();
            tokens.push(t);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: t == EOS,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        beams = next;
        if beams.is_empty() {
            break;
        }
        if finished.len() >= width {
            // log P <= 0, so no live beam can end above L / max_len^lp
            let best_done = finished.iter().map(|h| h.score(length_penalty)).fold(f64::NEG_INFINITY, f64::max);
            let bound = beams.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max)
                / (max_len as f64).powf(length_penalty);
            if best_done >= bound {
                break;
            }
        }
    }
    let pool: Vec<&Hypothesis> = finished.iter().chain(&beams).collect();
    let mut best = pool[0];
    for &h in &pool[1..] {
        if h.score(length_penalty) > best.score(length_penalty) {
            best = h;
        }
    }
    Ok(best.clone())
}

/// Beam (or greedy for width 1) decoding of many sources.
pub fn translate<F: Scalar>(
    model: &PrunedModel<'_, F>,
    sources: &[Vec<u32>],
    width: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<Hypothesis>> {
    if width == 1 {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(GREEDY_CHUNK) {
            out.extend(greedy_decode(model, chunk, max_len)?);
        }
        return Ok(out);
    }
    sources
        .iter()
        .map(|s| beam_search(model, s, width, max_len, length_penalty))
        .collect()
}

/// Length limit used when none is given: twice the source plus ten, within
/// the model's positional range.
pub fn default_max_len<F: Scalar>(model: &Model<F>, source_len: usize) -> usize {
    (2 * source_len + 10).min(model.config().max_len)
}
